import importlib.util
from pathlib import Path

BENCH = Path(__file__).resolve().parents[1] / "benchmarks" / "bench_kernels.py"


def test_benchmark_paths_agree(tmp_path, capsys):
    spec = importlib.util.spec_from_file_location("bench_kernels", BENCH)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    mod.main(["--repeat", "1", "--json", str(tmp_path / "b.json")])
    assert "loss_and_grad" in capsys.readouterr().out
    import json
    rows = json.loads((tmp_path / "b.json").read_text())["kernels"]
    assert all(r["max_abs_diff"] < 1e-10 for r in rows)
