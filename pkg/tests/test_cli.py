import subprocess
import sys
from dataclasses import replace

import numpy as np
import pytest

from imddeq import checkpoint, cli, experiments
from imddeq.cnn import Cnn
from imddeq.experiments import ConfigError, ExperimentConfig, format_ber, parse_ber, read_csv
from imddeq.volterra import VolterraSpec

TINY = """
[channel]
modulation = pam2
dispersion = 17

[training]
init_iterations = 20
retrain_iterations = 10
batch_symbols = 128
eval_symbols = 512
seeds = 1

[volterra]
memory = 5, 3, 1
iterations = 20

[sweep]
variable = d_cd
values = 17, 20.6

[snr_sweep]
values = 14, 20
offsets = 20.6

[quant]
gammas = 0, 0.3, 1.0
iterations = 10

[pipeline]
sequence_symbols = 256
dop.dop1 = 1, 1, 1, 1
dop.full = 3, 3, 21, 1

[output]
seed = 7
"""


@pytest.fixture
def tiny(tmp_path):
    p = tmp_path / "tiny.ini"
    p.write_text(TINY)
    return str(p)


def test_config_defaults_and_parse():
    cfg = ExperimentConfig.from_ini(TINY)
    assert cfg.d_values == (17.0, 20.6)
    assert cfg.n_seeds == 1 and cfg.seed == 7
    assert dict(cfg.dop_points)["full"].kernel == 21
    assert ExperimentConfig.from_ini("").init_iterations == ExperimentConfig().init_iterations


@pytest.mark.parametrize("text", [
    "[nonsense]\nx = 1\n",
    "[channel]\nmodulation = pam8\n",
    "[channel]\nrc_span = 14\n",
    "[training]\nseeds = 0\n",
    "[training]\ninit_iterations = abc\n",
    "[quant]\ngammas = 0, 1\n",
    "[sweep]\nvariable = snr\n",
    "[sweep]\narms = sup, mlp\n",
    "[loss]\nvariant = huber\n",
    "[loss]\nmu = -1\n",
    "[volterra]\nmemory = 3, 5, 1\n",
    "not an ini file",
])
def test_invalid_configs(text):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_ini(text)


def test_invalid_config_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[channel]\nmodulation = pam8\n")
    assert cli.main(["sweep-dispersion", "--config", str(bad)]) == cli.EXIT_INVALID
    assert "modulation" in capsys.readouterr().err
    assert cli.main(["pipeline-report", "--config", str(tmp_path / "missing.ini")]) == 1
    assert cli.main(["evaluate"]) == 1
    assert cli.main(["train"]) == 1
    assert cli.main(["sweep-dispersion", "--workers", "0"]) == 1
    with pytest.raises(SystemExit):
        cli.main(["frobnicate"])


def test_ber_formatting():
    assert format_ber(0, 32768) == "<3.052e-05"
    # a floor entry counts as half the floor when aggregated
    assert parse_ber("<3.052e-05") == pytest.approx(1.526e-5)
    assert parse_ber(format_ber(10, 1000)) == pytest.approx(0.01)


def _run_twice(verb, tiny, tmp_path, extra=()):
    outs = []
    for i in range(2):
        out = tmp_path / f"{verb}-{i}.csv"
        assert cli.main([verb, "--config", tiny, "--out", str(out), *extra]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    return read_csv(outs[0].decode())


def test_sweep_dispersion_deterministic(tiny, tmp_path):
    schema, rows = _run_twice("sweep-dispersion", tiny, tmp_path)
    assert schema == experiments.DISPERSION_SCHEMA
    arms = {r["arm"] for r in rows}
    assert arms == {"baseline", "no_retrain", "sup", "unsup", "volterra"}
    assert all(r["status"] == "ok" for r in rows)
    assert {float(r["d_cd"]) for r in rows} == {17.0, 20.6}


def test_dispersion_arm_subset():
    cfg = ExperimentConfig.from_ini(TINY)
    rows = experiments.sweep_dispersion(replace(cfg, arms=("no_retrain", "unsup"), d_values=(17.0,)))
    assert [r["arm"] for r in rows] == ["no_retrain", "unsup"]


def test_sweep_snr_deterministic(tiny, tmp_path):
    schema, rows = _run_twice("sweep-snr", tiny, tmp_path)
    assert schema == experiments.SNR_SCHEMA
    assert len(rows) > 0


def test_quant_pareto_deterministic(tiny, tmp_path):
    schema, rows = _run_twice("quant-pareto", tiny, tmp_path)
    assert schema == experiments.PARETO_SCHEMA
    assert [float(r["gamma"]) for r in rows] == [0.0, 0.3, 1.0]
    assert float(rows[0]["avg_bits"]) == 16.0


def test_pipeline_report_deterministic(tiny, tmp_path):
    schema, rows = _run_twice("pipeline-report", tiny, tmp_path)
    assert [r["point"] for r in rows] == ["dop1", "full"]
    assert float(rows[1]["throughput_sym_s"]) == pytest.approx(150e6)


def test_seed_changes_results(tiny, tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    cli.main(["sweep-snr", "--config", tiny, "--out", str(a)])
    cli.main(["sweep-snr", "--config", tiny, "--out", str(b), "--seed", "8"])
    assert a.read_bytes() != b.read_bytes()


def test_train_and_evaluate_roundtrip(tiny, tmp_path):
    ckpt = tmp_path / "model.ini"
    assert cli.main(["train", "--config", tiny, "--out", str(ckpt)]) == 0
    model = checkpoint.load(ckpt)
    assert isinstance(model, Cnn) and model.n_params == 315
    outs = []
    for i in range(2):
        out = tmp_path / f"eval{i}.csv"
        assert cli.main(["evaluate", "--config", tiny, "--checkpoint", str(ckpt),
                         "--out", str(out)]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    _, rows = read_csv(outs[0].decode())
    assert rows[0]["model"] == "cnn"


def test_checkpoint_roundtrip_exact():
    cnn = Cnn.init(seed=3)
    back = checkpoint.loads(checkpoint.dumps(cnn))
    assert all(np.array_equal(a, b) for a, b in zip(cnn.weights, back.weights))
    assert back.layers == cnn.layers
    spec = VolterraSpec((5, 3, 1), weights=np.random.default_rng(0).standard_normal(VolterraSpec((5, 3, 1)).n_params),
                        scales=np.array([1.0, 0.5, 0.25]))
    vb = checkpoint.loads(checkpoint.dumps(spec))
    assert np.array_equal(vb.weights, spec.weights) and vb.memory == spec.memory


@pytest.mark.parametrize("text", ["", "[checkpoint]\nversion = 9\ntype = cnn\n",
                                  "[checkpoint]\nversion = 1\ntype = mlp\n"])
def test_bad_checkpoint_rejected(text, tmp_path, tiny):
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(text)
    path = tmp_path / "bad.ckpt"
    path.write_text(text)
    assert cli.main(["evaluate", "--config", tiny, "--checkpoint", str(path)]) == 1


def test_selftest_detects_injected_fault():
    ok = subprocess.run([sys.executable, "-m", "imddeq", "selftest"], capture_output=True, text=True)
    assert ok.returncode == 0, ok.stdout + ok.stderr
    assert "FAIL" not in ok.stdout
    bad = subprocess.run([sys.executable, "-m", "imddeq", "selftest", "--inject-fault", "no-flip"],
                         capture_output=True, text=True)
    assert bad.returncode == 2
    assert "FAIL  gradients" in bad.stdout
