"""Extended MNIST run with a planar (d = 2) convolutional extractor.

Expects the four standard IDX files under ``--data`` (default data/mnist/);
they are not shipped. Trains with PGD at eps 0.3, evaluates, and leaves the
clean/adversarial 2-D test features in ``<out>/features.csv``. Budget is
roughly one to two hours on a single CPU core with the shipped limits.

    python scripts/mnist_extended.py --data /path/to/mnist --out runs/mnist
"""

import argparse
import json
import shutil
import sys
import tempfile
from pathlib import Path

from advdpnp.cli import main as cli

ROOT = Path(__file__).resolve().parents[1]
FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--data", type=Path, default=ROOT / "data" / "mnist")
    parser.add_argument("--config", type=Path, default=ROOT / "configs" / "mnist_lenetspp.json")
    parser.add_argument("--out", type=Path, default=ROOT / "runs" / "mnist_lenetspp")
    parser.add_argument("--train-limit", type=int, help="override the number of training images")
    args = parser.parse_args()

    missing = [name for name in FILES.values() if not (args.data / name).is_file()]
    if missing:
        print(f"missing MNIST files in {args.data}: {', '.join(missing)}", file=sys.stderr)
        return 2

    raw = json.loads(args.config.read_text())
    raw["dataset"].update({key: str((args.data / name).resolve()) for key, name in FILES.items()})
    if args.train_limit:
        raw["dataset"]["train_limit"] = args.train_limit
    tmp = Path(tempfile.mkdtemp())
    try:
        cfg = tmp / "mnist.json"
        cfg.write_text(json.dumps(raw))
        for cmd in ("train", "eval"):
            code = cli([cmd, "--config", str(cfg), "--out-dir", str(args.out), "-v"])
            if code:
                return code
    finally:
        shutil.rmtree(tmp)
    print(f"features: {args.out / 'features.csv'}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
