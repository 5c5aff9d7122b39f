"""The backend benchmark runs and proves output equality."""

from fieldcycle import benchmark
from fieldcycle.kernels import have_numba


def test_benchmark_smoke(capsys):
    rc = benchmark.main(["--windows", "2000", "--repeat", "1"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "backend=numpy" in out
    if have_numba():
        assert "backend=numba" in out
        assert "bit_identical=True" in out
