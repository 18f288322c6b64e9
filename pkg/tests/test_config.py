import pytest

from mchar.config import ConfigError, RunConfig, load_config, parse_config


def test_defaults_follow_reported_settings():
    c = RunConfig()
    assert (c.guidance, c.gen_steps, c.frames) == (8.0, 30, 16)
    assert (c.text_dropout, c.image_dropout, c.context_dropout) == (0.05, 0.05, 0.5)
    assert (c.T, c.beta_start, c.beta_end, c.latent_size, c.channels, c.layers) == (100, 1e-4, 0.02, 8, 4, 2)
    assert (c.lr, c.train_steps, c.lam, c.alpha, c.beta) == (1e-3, 500, 1.0, 1.0, 0.1)
    assert (c.d, c.d_txt) == (64, 64)


def test_parse_typed_values_and_comments():
    c = parse_config("""
# toy run
seed = 7
lr = 3e-3   # faster
manifest = data/m.jsonl
context_dropout=0
""")
    assert c.seed == 7 and isinstance(c.seed, int)
    assert c.lr == 3e-3 and c.manifest == "data/m.jsonl" and c.context_dropout == 0.0


@pytest.mark.parametrize("text", [
    "learning_rate = 0.1",
    "seed = 1\nseed = 2",
    "seed = one",
    "seed",
    "context_dropout = 1.5",
    "T = 0",
    "beta_start = 0.5\nbeta_end = 0.1",
    "lam = -1",
])
def test_parse_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_dump_parse_round_trip(tmp_path):
    c = parse_config("seed = 3\nlr = 0.002\nout_dir = runs/a")
    path = tmp_path / "run.cfg"
    path.write_text(c.dumps())
    assert load_config(path) == c


def test_path_validation(tmp_path):
    (tmp_path / "m.jsonl").write_text("")
    c = parse_config(f"manifest = {tmp_path / 'm.jsonl'}\nout_dir = {tmp_path / 'new'}")
    c.validate_paths("manifest", "out_dir")
    with pytest.raises(ConfigError):
        c.validate_paths("clip_dir")
    bad = parse_config(f"manifest = {tmp_path / 'absent'}\nout_dir = {tmp_path / 'x' / 'y'}")
    with pytest.raises(ConfigError):
        bad.validate_paths("manifest")
    with pytest.raises(ConfigError):
        bad.validate_paths("out_dir")
