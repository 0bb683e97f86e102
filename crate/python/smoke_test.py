"""Smoke test for the fibershape_py extension module.

Uses an installed module when available (``maturin develop`` in
crates/python); otherwise loads the shared library built by
``cargo build --release -p fibershape-py``.
"""

import cmath
import importlib.machinery
import importlib.util
import pathlib
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load_module():
    try:
        import fibershape_py

        return fibershape_py
    except ImportError:
        pass
    for profile in ("release", "debug"):
        lib = ROOT / "target" / profile / "libfibershape_py.so"
        if lib.exists():
            loader = importlib.machinery.ExtensionFileLoader("fibershape_py", str(lib))
            spec = importlib.util.spec_from_loader("fibershape_py", loader)
            mod = importlib.util.module_from_spec(spec)
            loader.exec_module(mod)
            return mod
    sys.exit("fibershape_py not found; run `cargo build --release -p fibershape-py` first")


def close(a, b, tol):
    return abs(a - b) <= tol


def main():
    fs = load_module()
    checks = []

    qpsk = fs.Constellation.baseline("pmqpsk")
    checks.append(("pmqpsk has 16 points", len(qpsk) == 16 and qpsk.m == 4))
    checks.append(("unit mean energy", close(qpsk.mean_energy(), 1.0, 1e-12)))
    energies = [e for _, _, e, _ in fs.Constellation.baseline("pm32qam").energy_report()]
    checks.append(("pm32qam energy report", len(energies) == 1024))

    gmi, ci = qpsk.gmi_awgn(15.0, 1 << 14, 3)
    checks.append(("pmqpsk GMI at 15 dB", close(gmi, 4.0, 0.02)))

    rate, oh = fs.net_rate_and_oh(8.0, 10, 50e9)
    checks.append(("net rate and overhead", close(rate, 400e9, 1e-3) and close(oh, 25.0, 1e-9)))

    link = fs.FiberLink(n_spans=1, gamma_per_w_km=0.0, nf_db=float("-inf"), steps_per_span=4)
    x = [cmath.exp(1j * 0.1 * k) * 1e-2 for k in range(64)]
    y = [0j] * 64
    ox, oy = link.propagate(x, y, 1e11)
    power_in = sum(abs(v) ** 2 for v in x)
    power_out = sum(abs(v) ** 2 for v in ox) + sum(abs(v) ** 2 for v in oy)
    checks.append(("lossless linear span conserves power", close(power_out / power_in, 1.0, 1e-9)))

    rrc = fs.rrc_selftest()
    checks.append(("rrc self test", rrc["passes"] == 1.0))

    cfg = fs.profile_config("toy-awgn").replace("max_iters = 5000", "max_iters = 30")
    trainer = fs.Trainer(cfg)
    first = trainer.step()
    trainer.run(29)
    checks.append(("trainer advances", trainer.iteration == 30 and first is not None))
    formats = trainer.extract_formats()
    checks.append(("learned format normalized", close(formats[0].mean_energy(), 1.0, 1e-9)))

    with tempfile.TemporaryDirectory() as d:
        path = pathlib.Path(d) / "fmt.txt"
        formats[0].save(str(path))
        back = fs.Constellation.load(str(path))
        checks.append(("format file round trip", back.points == formats[0].points))

    try:
        fs.Constellation.baseline("pm128qam")
        checks.append(("unknown baseline rejected", False))
    except ValueError:
        checks.append(("unknown baseline rejected", True))

    failed = 0
    for name, ok in checks:
        print(f"[{'PASS' if ok else 'FAIL'}] {name}")
        failed += not ok
    print(f"{len(checks) - failed}/{len(checks)} checks passed")
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
