#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "advnorm/metrics.hpp"
#include "advnorm/random.hpp"
#include "advnorm/trainer.hpp"

using namespace advnorm;
using namespace advnorm::train;

namespace {

const synth::DomainSuite& suite() {
  static const synth::DomainSuite s = [] {
    synth::PhantomSpec templ;
    templ.shape = Vec3i::cube(24);
    return synth::make_domain_suite({synth::single_channel(synth::adult_profile(1)), synth::single_channel(synth::infant_profile(2)),
                                     synth::single_channel(synth::shifted_profile(3))},
                                    3,
                                    templ, 5);
  }();
  return s;
}

ModelConfig tiny_model(int domains = 3) {
  ModelConfig m;
  m.generator = generator_config(1, 2, 1);
  m.segmenter = segmenter_config(1, 2, 1);
  m.discriminator.domains = domains;
  m.discriminator.input_size = 16;
  m.discriminator.widths = {2, 2, 3, 3};
  return m;
}

TrainConfig tiny_train() {
  TrainConfig c;
  c.patch = 16;
  c.m = 3;
  c.n_epochs = 1;
  c.n_iter = 2;
  c.train_patches = 6;
  c.val_patches = 2;
  c.seed = 11;
  return c;
}

std::vector<float> flat(const std::vector<nn::Parameter<Real>*>& ps) {
  std::vector<float> out;
  for (auto* p : ps) out.insert(out.end(), p->value.data(), p->value.data() + p->value.size());
  return out;
}

std::vector<float> flat_buffers(const std::vector<nn::Buffer<Real>>& bs) {
  std::vector<float> out;
  for (const auto& b : bs) out.insert(out.end(), b.tensor->data(), b.tensor->data() + b.tensor->size());
  return out;
}

PatchPool train_pool(const TrainConfig& c) {
  const auto subjects = suite().select(synth::Split::Train);
  return make_pool(subjects, {}, c.train_patches, c.patch, c.input, 1);
}

std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("advnorm_trainer_" + name);
  std::filesystem::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("adam step against a direct oracle") {
  nn::Parameter<double> p("w", {3});
  p.value[0] = 0.5;
  p.value[1] = -1.0;
  p.value[2] = 2.0;
  Adam<double>::Options o;
  o.weight_decay = 1e-3;
  Adam<double> adam({&p}, o);
  const double g[3][3] = {{0.1, -0.2, 0.0}, {0.3, 0.1, 0.0}, {-0.5, 0.05, 0.0}};
  double w[3] = {0.5, -1.0, 2.0}, m[3] = {}, v[3] = {};
  for (int t = 1; t <= 3; ++t) {
    for (int i = 0; i < 3; ++i) p.grad[static_cast<std::size_t>(i)] = g[t - 1][i];
    adam.step(0.01);
    for (int i = 0; i < 3; ++i) {
      m[i] = 0.9 * m[i] + 0.1 * g[t - 1][i];
      v[i] = 0.999 * v[i] + 0.001 * g[t - 1][i] * g[t - 1][i];
      const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.999, t));
      w[i] -= 0.01 * (mh / (std::sqrt(vh) + 1e-8) + 1e-3 * w[i]);
    }
  }
  for (int i = 0; i < 3; ++i) CHECK(p.value[static_cast<std::size_t>(i)] == doctest::Approx(w[i]).epsilon(1e-14));
  // the zero-gradient coordinate moved by weight decay alone
  CHECK(p.value[2] == doctest::Approx(2.0 * std::pow(1 - 1e-5, 3)).epsilon(1e-14));
  CHECK(adam.steps() == 3);

  const auto before = p.value.storage();
  adam.step(0.0);
  CHECK(p.value.storage() == before);

  p.grad[1] = std::nan("");
  CHECK_THROWS_AS(adam.step(0.01), NonFiniteError);
  CHECK(p.value.storage() == before);
}

TEST_CASE("learning-rate schedules") {
  const std::vector<int> ms{50, 75};
  CHECK(multistep_rate(1e-3, 1, ms) == 1e-3);
  CHECK(multistep_rate(1e-3, 50, ms) == 1e-3);
  CHECK(multistep_rate(1e-3, 51, ms) == doctest::Approx(1e-4).epsilon(1e-12));
  CHECK(multistep_rate(1e-3, 75, ms) == doctest::Approx(1e-4).epsilon(1e-12));
  CHECK(multistep_rate(1e-3, 76, ms) == doctest::Approx(1e-5).epsilon(1e-12));

  PlateauSchedule s(1e-4, 0.1, 7);
  s.observe(1.0);
  for (int i = 0; i < 7; ++i) CHECK(s.observe(1.0) == 1e-4);
  CHECK(s.observe(1.5) == doctest::Approx(1e-5).epsilon(1e-12));
  CHECK(s.observe(0.5) == doctest::Approx(1e-5).epsilon(1e-12));
  const std::vector<double> hist{1.0, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9, 0.95};
  CHECK(PlateauSchedule::replay(1e-4, 0.1, 7, hist) == doctest::Approx(1e-5).epsilon(1e-12));
  CHECK(PlateauSchedule::replay(1e-4, 0.1, 7, std::span(hist).first(9)) == 1e-4);
  CHECK_THROWS_AS(PlateauSchedule(1e-4, 0.1, 0), std::invalid_argument);

  PlateauSchedule t;
  t.from_json(s.to_json());
  CHECK(t.rate() == s.rate());
  CHECK(t.best() == s.best());
}

TEST_CASE("train config validation and json") {
  TrainConfig c = tiny_train();
  c.validate();
  c.lambda = 0.0;
  CHECK(c.run_tag() == "pre-processor");
  nlohmann::json j = c;
  const auto back = j.get<TrainConfig>();
  CHECK(nlohmann::json(back) == j);
  j["bogus"] = 1;
  CHECK_THROWS_AS(j.get<TrainConfig>(), std::invalid_argument);
  TrainConfig bad = c;
  bad.n_steps = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.lr_d = 0.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.patience = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  TrainConfig d;
  d.n_iter = 0;
  CHECK(d.iterations(2) == (2000 * 2 + 11) / 12);
}

TEST_CASE("stratified batches") {
  const auto c = tiny_train();
  const auto pool = train_pool(c);
  REQUIRE(pool.domains == std::vector<int>{1, 2, 3});

  std::map<std::vector<int>, int> patterns;
  std::array<int, 3> extra{};
  for (std::uint64_t s = 0; s < 300; ++s) {
    const auto b = sample_batch(pool, 4, s);
    REQUIRE(b.size() == 4);
    std::vector<int> counts(3);
    for (const auto& d : b) ++counts[static_cast<std::size_t>(d.z - 1)];
    ++patterns[counts];
    for (int k = 0; k < 3; ++k)
      if (counts[static_cast<std::size_t>(k)] == 2) ++extra[static_cast<std::size_t>(k)];
  }
  CHECK(patterns.size() == 3);
  for (const auto& [counts, n] : patterns) {
    auto sorted = counts;
    std::sort(sorted.begin(), sorted.end());
    CHECK(sorted == std::vector<int>{1, 1, 2});
  }
  for (int e : extra) CHECK(std::abs(e - 100) < 35);

  const auto a = sample_batch(pool, 4, 77), b = sample_batch(pool, 4, 77);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].z == b[i].z);
    CHECK(a[i].ref.volume == b[i].ref.volume);
    CHECK(a[i].ref.origin == b[i].ref.origin);
  }

  const std::vector<int> two{1, 2};
  const auto pool2 = make_pool(suite().select(synth::Split::Train), two, 4, 16, InputTransform::None, 3);
  for (std::uint64_t s = 0; s < 20; ++s) {
    int n1 = 0;
    for (const auto& d : sample_batch(pool2, 4, s)) n1 += d.z == 1 ? 1 : 0;
    CHECK(n1 == 2);
  }
  PatchPool empty = pool2;
  empty.refs[1].clear();
  CHECK_THROWS_AS(sample_batch(empty, 4, 0), std::invalid_argument);
}

TEST_CASE("step batches carry labels and augmentation") {
  const auto c = tiny_train();
  const auto pool = train_pool(c);
  const auto samples = sample_batch(pool, 3, 4);
  const auto plain = make_step_batch(pool, samples, 0.0, 1, 9);
  CHECK(plain.input.x.storage() == plain.real.storage());
  CHECK(plain.input.y.shape() == std::vector<int>{3, 4, 16, 16, 16});
  const std::size_t vox = 16 * 16 * 16;
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t v = 0; v < vox; v += 97) {
      double s = 0;
      for (std::size_t k = 0; k < 4; ++k) s += plain.input.y[(n * 4 + k) * vox + v];
      CHECK(s == 1.0);
    }
  const auto aug = make_step_batch(pool, samples, 1.0, 1, 9);
  CHECK(aug.real.storage() == plain.real.storage());
  CHECK(aug.input.x.storage() != plain.real.storage());
  for (double a : aug.alphas) CHECK(a > 0.0);
}

TEST_CASE("discriminator step isolation and progress") {
  auto c = tiny_train();
  auto st = make_state(tiny_model(), c);
  const auto pool = train_pool(c);
  const auto b = make_step_batch(pool, sample_batch(pool, 3, 1), 0.5, 1, 2);
  const auto g0 = flat(st->nets.generator.parameters()), s0 = flat(st->nets.segmenter.parameters());
  const auto gb0 = flat_buffers(st->nets.generator.buffers());
  const auto d0 = flat(st->nets.discriminator.parameters());

  discriminator_step(*st, b, 0.0, 3);
  CHECK(flat(st->nets.discriminator.parameters()) == d0);

  for (int i = 0; i < 11; ++i) discriminator_step(*st, b, 1e-3, 3);
  CHECK(flat(st->nets.generator.parameters()) == g0);
  CHECK(flat(st->nets.segmenter.parameters()) == s0);
  CHECK(flat_buffers(st->nets.generator.buffers()) == gb0);
  CHECK(flat(st->nets.discriminator.parameters()) != d0);
  CHECK(st->d_updates == 12);

  auto fresh = make_state(tiny_model(), c);
  const auto o0 = discriminator_step(*fresh, b, 1e-3, 3);
  for (int i = 0; i < 9; ++i) discriminator_step(*fresh, b, 1e-3, 3);
  const auto o10 = discriminator_step(*fresh, b, 0.0, 3);
  CHECK(o10.real_loss + o10.gen_loss < o0.real_loss + o0.gen_loss);

  fresh->nets.discriminator.parameters()[0]->value[0] = std::nanf("");
  CHECK_THROWS_AS(discriminator_step(*fresh, b, 1e-3, 3), NonFiniteError);
}

TEST_CASE("generator/segmenter step isolation") {
  auto c = tiny_train();
  auto st = make_state(tiny_model(), c);
  const auto pool = train_pool(c);
  const auto b = make_step_batch(pool, sample_batch(pool, 3, 1), 0.5, 1, 2);
  const auto d0 = flat(st->nets.discriminator.parameters());
  const auto g0 = flat(st->nets.generator.parameters()), s0 = flat(st->nets.segmenter.parameters());

  generator_segmenter_step(*st, b, 1.5, 0.0, 4);
  CHECK(flat(st->nets.generator.parameters()) == g0);
  CHECK(flat(st->nets.segmenter.parameters()) == s0);

  const auto o = generator_segmenter_step(*st, b, 1.5, 1e-3, 4);
  CHECK(std::isfinite(o.objective));
  CHECK(o.objective == doctest::Approx(o.seg_loss - 1.5 * o.gen_loss));
  CHECK(flat(st->nets.discriminator.parameters()) == d0);
  CHECK(flat(st->nets.generator.parameters()) != g0);
  CHECK(flat(st->nets.segmenter.parameters()) != s0);

  c.mode = Mode::SegmenterOnly;
  auto so = make_state(tiny_model(), c);
  const auto sg0 = flat(so->nets.generator.parameters()), ss0 = flat(so->nets.segmenter.parameters());
  generator_segmenter_step(*so, b, 1.5, 1e-3, 4);
  CHECK(flat(so->nets.generator.parameters()) == sg0);
  CHECK(flat(so->nets.segmenter.parameters()) != ss0);
}

TEST_CASE("training loop arithmetic, history and checkpoints") {
  auto c = tiny_train();
  c.n_steps = 3;
  auto st = make_state(tiny_model(), c);
  const auto dir = scratch_dir("loop");
  int iterations = 0;
  TrainCallbacks cb;
  cb.on_iteration = [&](int, int) { ++iterations; };
  train::train(*st, suite(), dir, cb);
  CHECK(iterations == 2);
  CHECK(st->d_updates == 6);
  CHECK(st->gs_updates == 2);
  REQUIRE(st->history.size() == 1);
  CHECK(st->history[0].tag == "adversarial");
  CHECK(std::filesystem::exists(dir / "last.ckpt"));
  CHECK(std::filesystem::exists(dir / "best.ckpt"));
  std::ifstream f(dir / "history.csv");
  std::stringstream ss;
  ss << f.rdbuf();
  const auto hist = parse_history_csv(ss.str());
  REQUIRE(hist.size() == 1);
  CHECK(history_csv(hist) == ss.str());
  CHECK(hist[0].d_updates == 6);
  CHECK(std::isfinite(hist[0].val_d_loss));
  CHECK(hist[0].val_dsc >= 0.0);

  auto back = from_checkpoint(read_checkpoint(dir / "last.ckpt"));
  CHECK(flat(back->all_parameters()) == flat(st->all_parameters()));
  CHECK(back->epoch == 1);
  CHECK(back->opt_d.steps() == 6);
  CHECK(history_csv(back->history) == history_csv(st->history));
  std::filesystem::remove_all(dir);
}

TEST_CASE("reproducibility and resume") {
  auto c = tiny_train();
  c.n_epochs = 2;
  c.n_iter = 1;
  c.n_steps = 1;
  auto a = make_state(tiny_model(), c);
  auto b = make_state(tiny_model(), c);
  train::train(*a, suite(), std::nullopt);
  train::train(*b, suite(), std::nullopt);
  CHECK(flat(a->all_parameters()) == flat(b->all_parameters()));
  CHECK(history_csv(a->history) == history_csv(b->history));

  auto c1 = c;
  c1.n_epochs = 1;
  auto r = make_state(tiny_model(), c1);
  const auto dir = scratch_dir("resume");
  train::train(*r, suite(), dir);
  auto resumed = from_checkpoint(read_checkpoint(dir / "last.ckpt"));
  resumed->config.n_epochs = 2;
  train::train(*resumed, suite(), dir);
  CHECK(resumed->epoch == 2);
  CHECK(resumed->history.size() == 2);
  CHECK(flat(resumed->all_parameters()) == flat(a->all_parameters()));
  CHECK(history_csv(resumed->history) == history_csv(a->history));
  std::filesystem::remove_all(dir);
}

TEST_CASE("lambda 0 matches the pre-processor run") {
  auto c = tiny_train();
  c.lambda = 0.0;
  auto adv = make_state(tiny_model(), c);
  train::train(*adv, suite(), std::nullopt);
  c.mode = Mode::Preprocessor;
  auto pre = make_state(tiny_model(), c);
  train::train(*pre, suite(), std::nullopt);
  CHECK(adv->d_updates == 6);
  CHECK(pre->d_updates == 0);
  CHECK(adv->history[0].tag == "pre-processor");
  CHECK(flat(adv->nets.generator.parameters()) == flat(pre->nets.generator.parameters()));
  CHECK(flat(adv->nets.segmenter.parameters()) == flat(pre->nets.segmenter.parameters()));
}

TEST_CASE("evaluation") {
  const auto test = suite().select(synth::Split::Test);
  for (const auto* s : test) {
    const auto& t = s->volume.labels;
    for (int c = 1; c < kNumClasses; ++c) {
      CHECK(metrics::dsc(t, t, c) == 1.0);
      CHECK(metrics::mhd(t, t, c, s->volume.image.spacing()) == 0.0);
    }
  }

  auto c = tiny_train();
  auto st = make_state(tiny_model(), c);
  EvalOptions o;
  o.discriminator_patches = 2;
  const auto r1 = evaluate(st->nets, c, test, o);
  const auto r2 = evaluate(st->nets, c, test, o);
  REQUIRE(r1.domains.size() == 3);
  CHECK(std::isfinite(r1.overall.mean_dsc));
  CHECK(std::isfinite(r1.overall.mean_mhd));
  CHECK(std::isfinite(r1.raw_jsd));
  CHECK(std::isfinite(r1.normalized_jsd));
  r1.overall.validate();
  CHECK(r1.overall.confusion.size() == 4);
  CHECK(nlohmann::json(r1.overall) == nlohmann::json(r2.overall));
  CHECK(r1.raw_jsd == r2.raw_jsd);

  // untrained segmenter on the raw image path
  c.mode = Mode::SegmenterOnly;
  const auto so = evaluate(st->nets, c, test, o);
  CHECK(so.overall.confusion.empty());
  CHECK(so.normalized_jsd == so.raw_jsd);

  o.bias_alpha = 0.6;
  const auto biased = evaluate(st->nets, c, test, o);
  CHECK(std::abs(biased.domains[0].raw_pearson) > std::abs(so.domains[0].raw_pearson));
}

TEST_CASE("segment_volume tiles and averages") {
  auto st = make_state(tiny_model(), tiny_train());
  const auto* s = suite().select(synth::Split::Test).front();
  const auto seg = segment_volume(st->nets, s->volume.image, Mode::Adversarial, 16, 8, 3);
  CHECK(seg.probs.classes() == 4);
  CHECK(seg.normalized.shape() == s->volume.image.shape());
  for (int c : seg.probs.counts) CHECK(c >= 1);
  const auto plain = segment_volume(st->nets, s->volume.image, Mode::SegmenterOnly, 16, 8, 3);
  CHECK(plain.normalized.data() == s->volume.image.data());
}
