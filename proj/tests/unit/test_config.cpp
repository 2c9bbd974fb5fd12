#include <gtest/gtest.h>

#include "throttle/config.hpp"
#include "throttle/error.hpp"

using namespace throttle;

namespace {

std::string error_of(const std::string& text) {
  try {
    resolve_config(parse_config_text(text, "exp.toml"));
  } catch (const ConfigError& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST(ConfigParse, SectionsValuesAndComments) {
  const auto a = parse_config_text(
      "# header\n[run]\nseed = 7  # trailing\nout = \"dir with space\"\n\n[model]\nname = t-vgg\nwidths = [8, 16, 32]\n",
      "exp.toml");
  ASSERT_EQ(a.size(), 4u);
  EXPECT_EQ(a[0].key, "run.seed");
  EXPECT_EQ(a[0].value, "7");
  EXPECT_EQ(a[0].origin, "exp.toml:3");
  EXPECT_EQ(a[3].key, "model.widths");
  const ExperimentConfig c = resolve_config(a);
  EXPECT_EQ(c.seed, 7u);
  EXPECT_EQ(c.out, "dir with space");
  EXPECT_EQ(c.model.name, "t-vgg");
  EXPECT_EQ(c.model.widths, (std::vector<std::size_t>{8, 16, 32}));
  EXPECT_EQ(c.train.seed, 7u);
  EXPECT_EQ(c.sweep.seed, 7u);
}

TEST(ConfigParse, MalformedLinesNameFileAndLine) {
  EXPECT_THROW(parse_config_text("[train\n", "x.toml"), ConfigError);
  try {
    parse_config_text("[train]\nepochs\n", "x.toml");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("x.toml:2"), std::string::npos);
  }
  EXPECT_THROW(parse_config_text("epochs = 3\n", "x.toml"), ConfigError);
}

TEST(ConfigResolve, ErrorsNameKeyAndOrigin) {
  EXPECT_NE(error_of("[train]\nepochs = ten\n").find("exp.toml:2"), std::string::npos);
  EXPECT_NE(error_of("[train]\nepochs = ten\n").find("train.epochs"), std::string::npos);
  EXPECT_NE(error_of("[train]\nbogus = 1\n").find("train.bogus"), std::string::npos);
  EXPECT_NE(error_of("[train]\nlr = -1\n").find("train.lr"), std::string::npos);
  EXPECT_NE(error_of("[controller]\nestimator = concrete\ntemperature = 0\n").find("controller.temperature"),
            std::string::npos);
  EXPECT_NE(error_of("[sweep]\nstrategy = sideways\n").find("sweep.strategy"), std::string::npos);
  EXPECT_NE(error_of("[train]\noptimizer = rmsprop\n").find("train.optimizer"), std::string::npos);
}

TEST(ConfigResolve, OverridesWinAndModelNameResetsDefaults) {
  auto a = parse_config_text("[model]\ncomponents = 3\n[train]\nepochs = 5\n", "exp.toml");
  a.push_back(parse_override("train.epochs=1"));
  a.push_back(parse_override("model.name=t-resnet-d"));
  const ExperimentConfig c = resolve_config(a);
  EXPECT_EQ(c.train.epochs, 1u);
  EXPECT_EQ(c.model.name, "t-resnet-d");
  EXPECT_EQ(c.model.components, 3u);
  EXPECT_THROW(parse_override("no-equals"), ConfigError);
  try {
    resolve_config({parse_override("train.epochs=x")});
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("--set"), std::string::npos);
  }
}

TEST(ConfigResolve, SharedPenaltyKeysAndControllerDefaults) {
  const ExperimentConfig d;
  EXPECT_EQ(d.controller.optimizer.kind, OptimizerConfig::Kind::kAdam);
  const ExperimentConfig c =
      resolve_config(parse_config_text("[controller]\npenalty = hinge\nexponent = 1\nlambda = 4\n", "p"));
  EXPECT_EQ(c.controller.penalty.form, PenaltySpec::Form::kHinge);
  EXPECT_EQ(c.controller.penalty.exponent, 1);
  EXPECT_DOUBLE_EQ(c.controller.penalty.lambda, 4.0);
  EXPECT_DOUBLE_EQ(c.train.penalty.lambda, 4.0);
}

TEST(ConfigRender, RoundTripsEveryKey) {
  auto a = parse_config_text(
      "[run]\nseed = 3\n[model]\nname = t-densenet\ngrowth = 5\n[data]\nkind = blobs\nnoise = 0.25\n"
      "[train]\nu = annealed\nu_step = 0.1\nper_module_k = true\n[controller]\nestimator = concrete\n"
      "temperature = 0.3\nhidden = 12\n[sweep]\npoints = 5\nstrategy = independent\n",
      "exp.toml");
  const ExperimentConfig c = resolve_config(a);
  const std::string text = render_config(c);
  const ExperimentConfig r = resolve_config(parse_config_text(text, "rendered"));
  EXPECT_EQ(render_config(r), text);
  EXPECT_EQ(r.model.growth, 5u);
  EXPECT_EQ(r.controller_hidden, 12u);
  EXPECT_EQ(r.sweep.grid.size(), 5u);
  EXPECT_DOUBLE_EQ(r.data.synth.noise, 0.25);
  for (const std::string& key : config_keys()) {
    const auto dot = key.find('.');
    EXPECT_NE(text.find("\n" + key.substr(dot + 1) + " = "), std::string::npos) << key;
  }
}
