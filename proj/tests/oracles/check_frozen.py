"""Re-runs the oracle scripts and compares with the frozen fixtures."""
import json
import math
import pathlib
import subprocess
import sys

HERE = pathlib.Path(__file__).resolve().parent
SCRIPTS = {"zero_snr.json": "zero_snr.py", "frechet.json": "frechet.py", "sampler.json": "sampler.py"}


def close(a, b, path="$"):
    if isinstance(a, dict):
        assert a.keys() == b.keys(), path
        for k in a:
            close(a[k], b[k], f"{path}.{k}")
    elif isinstance(a, list):
        assert len(a) == len(b), path
        for i, (x, y) in enumerate(zip(a, b)):
            close(x, y, f"{path}[{i}]")
    elif isinstance(a, float) or isinstance(b, float):
        assert math.isclose(a, b, rel_tol=1e-12, abs_tol=1e-12), f"{path}: {a} != {b}"
    else:
        assert a == b, f"{path}: {a} != {b}"


def main(frozen_dir, out_dir):
    frozen_dir, out_dir = pathlib.Path(frozen_dir), pathlib.Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, script in SCRIPTS.items():
        out = out_dir / name
        subprocess.run([sys.executable, str(HERE / script), str(out)], check=True, cwd=HERE)
        close(json.loads((frozen_dir / name).read_text()), json.loads(out.read_text()))
        print(f"{name}: matches frozen fixture")

    golden = frozen_dir.parent / "golden" / "transcripts"
    out = out_dir / "transcripts"
    subprocess.run([sys.executable, str(HERE / "transcripts.py"), str(out)], check=True, cwd=HERE)
    names = sorted(p.name for p in golden.glob("*.json"))
    assert names == sorted(p.name for p in out.glob("*.json")), "transcript set differs"
    for name in names:
        close(json.loads((golden / name).read_text()), json.loads((out / name).read_text()), name)
    print(f"transcripts: {len(names)} match frozen fixtures")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
