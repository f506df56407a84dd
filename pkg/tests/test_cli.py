import io
import json

import pytest

from actsparse.cli import run


def call(*argv):
    buf = io.StringIO()
    code = run(list(argv), out=buf)
    return code, buf.getvalue()


def test_flops_command():
    code, out = call("flops", "--nctx", "8192", "--preset", "gemma2-2b")
    assert code == 0
    doc = json.loads(out)
    assert doc["schema_version"] == 1
    assert doc["summary"]["standard"]["total"] == 245_366_784
    assert doc["summary"]["spark"]["total"] == 102_606_336
    assert 2.3 <= doc["summary"]["ratio"] <= 2.6


def test_flops_csv():
    code, out = call("flops", "--output", "csv")
    lines = out.strip().splitlines()
    assert lines[0] == "schema_version,command,component,standard,spark"
    assert lines[1] == "1,flops,ffn,127401984,39495168"


def test_validate_command():
    code, out = call("validate", "--d", "13824", "--k", "1106", "--trials", "200", "--delta", "0.01")
    assert code == 0
    assert json.loads(out)["summary"]["frac_within"] >= 0.99


def test_validate_failure_exit_code(monkeypatch):
    from actsparse import harness

    real = harness.concentration_montecarlo

    def loose_bound(*a, **kw):
        rep = real(*a, **kw)
        return harness.ValidationReport(rep.d, rep.k, rep.mu, rep.sigma, rep.delta,
                                        rep.counts, bound=-1.0)

    monkeypatch.setattr(harness, "concentration_montecarlo", loose_bound)
    code, out = call("validate", "--d", "64", "--k", "8", "--trials", "5")
    assert code == 1
    assert json.loads(out)["summary"]["passed"] is False


def test_demo_deterministic():
    a = call("demo", "--steps", "3", "--preset", "tiny", "--seed", "5")
    b = call("demo", "--steps", "3", "--preset", "tiny", "--seed", "5")
    assert a[0] == 0 and a == b
    assert json.loads(a[1])["summary"]["steps"] == 3


def test_overrides_and_config_file(tmp_path):
    cfg = tmp_path / "model.cfg"
    cfg.write_text("# tiny variant\nn_layers = 2\nk_ff = 30\n")
    code, out = call("demo", "--steps", "2", "--config", str(cfg), "--set", "r_ff=32")
    assert code == 0
    assert len(json.loads(out)["summary"]["per_layer_ffn_nonzero_frac"]) == 2


@pytest.mark.parametrize("argv", [
    ["demo", "--set", "bogus=1"],
    ["demo", "--set", "k_ff=10000"],
    ["demo", "--set", "noequals"],
    ["flops", "--no-such-flag"],
    ["nosuchcommand"],
    [],
])
def test_usage_errors(argv):
    assert call(*argv)[0] == 2


@pytest.mark.parametrize("cmd", ["validate", "diag", "flops", "bench", "demo"])
def test_help(cmd, capsys, tmp_path):
    code, out = call(cmd, "--help")
    assert code == 0
    assert out == ""
    assert "usage" in capsys.readouterr().out


def test_diag_and_figures(tmp_path):
    code, out = call("diag", "--d", "2000", "--k", "160", "--figures", str(tmp_path))
    assert code == 0
    assert (tmp_path / "diag_fit.png").stat().st_size > 0
    doc = json.loads(out)
    assert doc["summary"]["relative_gap"] < 0.1
    code, out = call("diag", "--source", "model", "--steps", "3")
    assert code == 0 and json.loads(out)["summary"]["d"] == 768


def test_bench_small(tmp_path):
    code, out = call("bench", "--set", "d_model=64", "--set", "d_ff=512", "--set", "k_ff=40",
                     "--set", "r_ff=32", "--set", "d_attn=32", "--set", "r_attn=16", "--set", "n_heads=2",
                     "--reps", "2", "--output", "csv", "--figures", str(tmp_path))
    assert code == 0
    assert out.splitlines()[0].startswith("schema_version,command,kernel,path")
    assert (tmp_path / "bench.png").exists()


def test_threads_env(monkeypatch):
    monkeypatch.setenv("ACTSPARSE_THREADS", "3")
    from actsparse.cli import build_parser
    args = build_parser().parse_args(["validate"])
    assert args.threads == 3
