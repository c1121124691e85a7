#include <gtest/gtest.h>

#include "dcqfa/io.hpp"

using namespace dcqfa;

namespace {

Supernet calibrated_net(const SearchSpace& space, std::uint64_t seed) {
  Supernet net(Architecture::for_space(space), space, seed);
  calibrate_all(net, Dataset(generate_demos(PushBoxParams{}, 3, seed)).all().first);
  net.freeze_act_quantizers();
  return net;
}

}  // namespace

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  const SearchSpace space;
  const Supernet net = calibrated_net(space, 3);
  TrainingState st;
  st.train_steps = 12;
  st.rng_state = "abc";
  const std::string a = encode_supernet(net, st);
  const SupernetCheckpoint ck = decode_supernet(a, &space);
  EXPECT_EQ(ck.state.train_steps, 12);
  EXPECT_EQ(encode_supernet(ck.net, ck.state), a);
  for (std::size_t i = 0; i < net.params().size(); ++i) EXPECT_EQ(ck.net.params()[i], net.params()[i]);
}

TEST(Checkpoint, FingerprintMismatchIsAUserError) {
  const SearchSpace space;
  const std::string bytes = encode_supernet(calibrated_net(space, 4), {});
  SearchSpace other = space;
  other.weight_bits = {4, 8};
  try {
    decode_supernet(bytes, &other);
    FAIL() << "expected UserError";
  } catch (const UserError& e) {
    EXPECT_NE(std::string(e.what()).find("fingerprint"), std::string::npos);
  }
}

TEST(Checkpoint, CorruptBytesAreRejected) {
  const SearchSpace space;
  const std::string bytes = encode_supernet(calibrated_net(space, 5), {});
  EXPECT_THROW(decode_supernet(bytes.substr(0, bytes.size() / 2)), UserError);
  EXPECT_THROW(decode_supernet(bytes + "x"), UserError);
  std::string bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_supernet(bad), UserError);
}

TEST(Checkpoint, SubnetRoundTrip) {
  const SearchSpace space;
  const Supernet net = calibrated_net(space, 6);
  SubnetConfig c = largest_config(space);
  c.layers[1] = LayerChoice{true, 1.0, 0.5, 4, 8};
  c.layers[2].keep = false;
  c = canonicalize(space, c);
  const Subnet s = net.extract(c);
  const std::string bytes = encode_subnet(s);
  const Subnet back = decode_subnet(bytes);
  EXPECT_EQ(encode_subnet(back), bytes);
  const Tensor obs = Dataset(generate_demos(PushBoxParams{}, 2, 7)).all().first;
  EXPECT_EQ(back.predict(obs), s.predict(obs));
  EXPECT_THROW(decode_supernet(bytes), UserError);
}

TEST(RunConfig, UnknownKeysAreRejected) {
  json c = default_run_config();
  EXPECT_THROW(apply_override(c, "train.stpes=3"), UserError);
  EXPECT_THROW(apply_override(c, "bogus=1"), UserError);
  EXPECT_THROW(apply_override(c, "noequals"), UserError);
  EXPECT_THROW(apply_override(c, "train.steps=\"many\""), UserError);
  apply_override(c, "train.steps=17");
  apply_override(c, "search.selection=knee");
  EXPECT_EQ(c.at("train").at("steps").get<int>(), 17);
  EXPECT_EQ(selection_rule(c), SelectionRule::kKnee);
  EXPECT_EQ(train_config(c).steps, 17u);
  apply_override(c, "train.sampling=sometimes");
  EXPECT_THROW(train_config(c), UserError);
}

TEST(RunConfig, FileLoadingValidates) {
  const auto dir = std::filesystem::temp_directory_path() / "dcqfa_io_test";
  std::filesystem::create_directories(dir);
  const std::string good = (dir / "good.json").string();
  const std::string bad = (dir / "bad.json").string();
  write_file(good, R"({"search": {"generations": 3}})");
  write_file(bad, R"({"search": {"generation": 3}})");
  EXPECT_EQ(search_params(load_run_config(good)).generations, 3u);
  EXPECT_EQ(search_params(load_run_config(good)).population, SearchParams{}.population);
  EXPECT_THROW(load_run_config(bad), UserError);
  EXPECT_THROW(load_run_config((dir / "missing.json").string()), UserError);
  write_file(bad, "{not json");
  EXPECT_THROW(load_run_config(bad), UserError);
}

TEST(Metrics, RowFormat) {
  MetricRow r;
  r.step = 3;
  r.device_id = "edge-a";
  r.config_hash = 0xabc;
  r.policy_loss = 0.25;
  r.reg_latency = 1.0;
  r.reg_memory = 0.5;
  r.base_loss = 0.4;
  EXPECT_EQ(metrics_row(r), "3,edge-a,0000000000000abc,0.25,1,0.5,0.4,,\n");
  r.horizon = 4;
  r.opd_loss = 0.125;
  EXPECT_EQ(metrics_row(r), "3,edge-a,0000000000000abc,0.25,1,0.5,0.4,4,0.125\n");
  EXPECT_EQ(metrics_header(), "step,device_id,config_hash,L_policy,R_lat,R_mem,L_base,K,L_opd\n");
}

TEST(Fronts, JsonRoundTrip) {
  SearchSpace space;
  space.num_layers = 2;
  const Architecture arch = Architecture::for_space(space);
  SyntheticDevice d;
  d.device_id = "d";
  const DeviceProfile prof = synthesize_profile(d, space, arch);
  SearchParams sp;
  sp.generations = 3;
  const FitnessFn fit = [](const SubnetConfig& c) { return 1.0 / (1.0 + static_cast<double>(c.active_layers())); };
  const ParetoFront f = run_search(space, arch, prof, fit, sp, 1);
  const ParetoFront back = front_from_json(front_to_json(space, f, 0));
  ASSERT_EQ(back.members.size(), f.members.size());
  EXPECT_EQ(front_csv(back), front_csv(f));
}
