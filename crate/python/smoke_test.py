"""Smoke test for the evio Python module.

Uses an installed `evio` if there is one (maturin develop), otherwise loads
the library built by `cargo build --release -p evio-py`.
"""

import importlib.machinery
import importlib.util
import math
import pathlib
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parents[1]


def load_evio():
    try:
        import evio

        return evio
    except ImportError:
        pass
    for profile in ("release", "debug"):
        lib = ROOT / "target" / profile / "libevio.so"
        if lib.exists():
            loader = importlib.machinery.ExtensionFileLoader("evio", str(lib))
            spec = importlib.util.spec_from_loader("evio", loader)
            module = importlib.util.module_from_spec(spec)
            loader.exec_module(module)
            return module
    sys.exit("evio not importable; run `cargo build --release -p evio-py` first")


def main():
    evio = load_evio()

    cfg = evio.Config(klt__window=15)
    assert cfg.get("klt.window") == "15"
    cfg.set("enhance.method", "canny")
    assert "klt.window = 15" in cfg.dump()
    assert "klt.window" in evio.Config.keys()
    try:
        evio.Config(no__such_key=1)
    except ValueError:
        pass
    else:
        raise AssertionError("unknown key accepted")

    w, h = 64, 48
    frame = [float((x // 8 + y // 8) % 2) * 5.0 for y in range(h) for x in range(w)]
    out = evio.enhance(frame, w, h)
    assert len(out) == w * h and all(0.0 <= v <= 255.0 for v in out)

    with tempfile.TemporaryDirectory() as tmp:
        ds = pathlib.Path(tmp) / "circle"
        counts = evio.simulate(str(ds), trajectory="circle", duration=1.0, seed=3)
        assert counts["events"] > 10000 and counts["poses"] > 0, counts

        res = evio.run(str(ds))
        est = res.trajectory
        assert len(est) > 10 and math.isfinite(res.scale)
        gt = evio.Trajectory.read(str(ds / "groundtruth.txt"))
        report = evio.evaluate(est, gt, align="se3")
        print(f"{len(est)} poses, APE rmse {report['rmse']:.4f} m, {res.frames_per_s:.1f} frames/s")
        assert report["rmse"] < 0.05, report

        path = pathlib.Path(tmp) / "est.txt"
        est.write(str(path))
        back = evio.Trajectory.read(str(path))
        assert len(back) == len(est)
        assert max(abs(a - b) for p, q in zip(back.positions, est.positions) for a, b in zip(p, q)) < 1e-6

        try:
            evio.run(str(pathlib.Path(tmp) / "missing"))
        except evio.EvioError as e:
            assert "calib.txt" in str(e)
        else:
            raise AssertionError("missing dataset accepted")

    print("python smoke test passed")


if __name__ == "__main__":
    main()
