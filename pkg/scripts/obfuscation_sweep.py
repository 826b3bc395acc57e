"""Gradient-obfuscation diagnostics on a trained model.

Sweeps the attack budget, iteration count and restarts, and compares the
cross-entropy attack against the adaptive composite-loss attack.

    python scripts/obfuscation_sweep.py                      # trains the toy model first
    python scripts/obfuscation_sweep.py --checkpoint runs/toy_blobs/checkpoint.advp
"""

import argparse
from pathlib import Path

from advdpnp.cli import sweep_rows
from advdpnp.config import load_config
from advdpnp.model import load_checkpoint
from advdpnp.trainer import train

ROOT = Path(__file__).resolve().parents[1]


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--config", type=Path, default=ROOT / "configs" / "toy_blobs.json")
    parser.add_argument("--checkpoint", type=Path)
    parser.add_argument("--seed", type=int)
    args = parser.parse_args()

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    test = cfg.dataset.load("test")
    if args.checkpoint:
        params = load_checkpoint(args.checkpoint)
    else:
        params, _ = train(cfg.train, cfg.dataset.load("train"), cfg.architecture, test.num_classes)

    rows = sweep_rows(cfg, params, test)
    print(f"{'kind':<12}{'value':>10}{'accuracy':>12}{'mean CE':>12}")
    for kind, value, acc, loss in rows:
        print(f"{kind:<12}{value!s:>10}{acc:>12.4f}{loss:>12.4f}")

    pgd = [acc for kind, _, acc, _ in rows if kind == "eps-pgd"]
    if pgd:
        print("PGD accuracy non-increasing in eps:", all(b <= a for a, b in zip(pgd, pgd[1:])))
    by_objective = {value: acc for kind, value, acc, _ in rows if kind == "objective"}
    if by_objective:
        print(f"CE vs composite gap: {100 * abs(by_objective['ce'] - by_objective['composite']):.2f} points")


if __name__ == "__main__":
    main()
