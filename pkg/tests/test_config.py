import pytest

from priorsplat.config import PHASES, RunConfig, describe_keys
from priorsplat.errors import ConfigError


def test_method_constants_are_the_defaults():
    cfg = RunConfig.from_profile()
    assert cfg["stage1.lambda_local"] == 1.5
    assert cfg["priors.tau_sim"] == 0.75 and cfg["priors.tau_l1"] == 0.05
    assert cfg["stage2.lambda_robust"] == 0.5 and cfg["stage2.lambda_prior"] == 1.0
    assert cfg["stage2.mlp_lr"] == 1e-3
    assert cfg["lambda_dssim"] == 0.2


def test_paper_profile_uses_full_scale_schedule():
    cfg = RunConfig.from_profile("paper")
    assert cfg["stage1.iterations"] == 10000 and cfg["stage2.iterations"] == 30000
    assert cfg["stage2.t_densify"] == cfg["stage2.beta_prior"] == cfg["stage2.beta_robustness"] == 10000
    assert (cfg["stage2.densify_start"], cfg["stage2.densify_end"]) == (10000, 20000)
    desk = RunConfig.from_profile("desk")
    assert (desk["stage1.iterations"], desk["stage2.iterations"]) == (1500, 4000)
    with pytest.raises(ConfigError):
        RunConfig.from_profile("laptop")


def test_unknown_keys_and_bad_values_are_rejected():
    with pytest.raises(ConfigError):
        RunConfig.from_profile(overrides={"stage1.lamda_local": 1.0})
    with pytest.raises(ConfigError):
        RunConfig.from_profile(overrides={"stage1.iterations": "many"})
    with pytest.raises(ConfigError):
        RunConfig.from_profile(overrides={"priors.tau_sim": 1.5})
    with pytest.raises(ConfigError):
        RunConfig.from_profile(overrides={"stage2.mask": "magic"})
    with pytest.raises(ConfigError):
        RunConfig.from_profile(overrides={"stage2.densify_end": 99999})
    with pytest.raises(ConfigError):
        RunConfig.from_profile().with_overrides(dataset__views=0)
    with pytest.raises(ConfigError):
        RunConfig.from_profile()["nope"]


def test_file_parsing(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# comment\nseed = 7\n\ndataset.world_extent = 4.0,3.0  # inline\n"
                 "stage2.use_prior = off\n")
    cfg = RunConfig.from_file(p, overrides={"seed": "8"})
    assert cfg["seed"] == 8
    assert cfg["dataset.world_extent"] == (4.0, 3.0)
    assert cfg["stage2.use_prior"] is False
    p.write_text("seed 7\n")
    with pytest.raises(ConfigError):
        RunConfig.from_file(p)
    with pytest.raises(ConfigError):
        RunConfig.from_file(tmp_path / "absent.cfg")


def test_dumps_roundtrips(tmp_path):
    cfg = RunConfig.from_profile(overrides={"stage2.lambda_reg": 0.02, "seed": 3})
    p = tmp_path / "dump.cfg"
    p.write_text(cfg.dumps())
    assert RunConfig.from_file(p).values == cfg.values


def test_phase_hash_follows_dependencies():
    base = RunConfig.from_profile()
    hashes = {ph: base.phase_hash(ph) for ph in PHASES}
    changed = base.with_overrides(priors__tau_sim=0.7)
    assert changed.phase_hash("generate") == hashes["generate"]
    assert changed.phase_hash("stage1") == hashes["stage1"]
    for ph in ("priors", "stage2", "eval"):
        assert changed.phase_hash(ph) != hashes[ph]
    seeded = base.with_overrides(seed=1)
    assert all(seeded.phase_hash(ph) != hashes[ph] for ph in PHASES)
    assert base.with_overrides(out="elsewhere").phase_hash("eval") == hashes["eval"]
    with pytest.raises(ConfigError):
        base.phase_hash("render")


def test_every_key_is_documented():
    rows = describe_keys()
    assert len(rows) == len(RunConfig.from_profile().values)
    assert all(note for _, _, note in rows)
