"""Sweep synthetic-testbed knobs for the cross-domain experiment.

Runs the full leave-one-out protocol (rotating the held-out domain across
master seeds) for each candidate setting and prints per-seed rows plus the
mean table with the ordering and gap verdict.  This is the tool that picked
the constants pinned in tests/test_acceptance.py; it is not package API.

Example:
    python3 scripts/calibrate_testbed.py \
        --warp 4.5 --sigma 0.3 --alpha 0.01 --optimizer adam --trials 300
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from fsdg.evaluation import evaluate
from fsdg.tasks import SyntheticDomainSpec, generate_synthetic_domain
from fsdg.training import TrainConfig, train_loop

MODES = ("baseline", "ft", "lft")


def run_setting(args) -> bool:
    per_mode = {m: [] for m in MODES}
    t0 = time.time()
    for i, master in enumerate(args.seeds):
        specs = [
            SyntheticDomainSpec(master_seed=master, domain_seed=d,
                                latent_dim=args.latent, noise_sigma=args.sigma,
                                warp_strength=args.warp)
            for d in range(args.n_domains)
        ]
        domains = [generate_synthetic_domain(s) for s in specs]
        held_idx = i % args.n_domains
        held = domains[held_idx]
        seen = [d for j, d in enumerate(domains) if j != held_idx]
        row = []
        for mode in MODES:
            cfg = TrainConfig(mode=mode, head="proto", alpha=args.alpha,
                              iterations=args.iterations, way=5, shot=5,
                              encoder_widths=tuple(args.widths), seed=master,
                              optimizer=args.optimizer,
                              inner_steps=args.inner_steps)
            model, _ = train_loop(cfg, seen)
            acc = evaluate(model, held, 5, 5, trials=args.trials, seed=master).mean
            per_mode[mode].append(acc)
            row.append(f"{mode}={acc:.3f}")
        print(f"  master={master} held={held_idx} " + " ".join(row), flush=True)

    means = {m: float(np.mean(v)) for m, v in per_mode.items()}
    b, f, l = means["baseline"], means["ft"], means["lft"]
    ordered = l >= f >= b
    gap = l - b
    ok = ordered and gap >= 0.02
    print(f"MEANS base={b:.4f} ft={f:.4f} lft={l:.4f} "
          f"order={'OK' if ordered else 'NO'} gap={gap * 100:+.2f} pts "
          f"=> {'PASS' if ok else 'FAIL'} ({time.time() - t0:.0f}s)")
    return ok


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[11, 12, 13, 14, 15])
    ap.add_argument("--n-domains", type=int, default=5)
    ap.add_argument("--latent", type=int, default=4)
    ap.add_argument("--sigma", type=float, default=0.3)
    ap.add_argument("--warp", type=float, default=4.5)
    ap.add_argument("--alpha", type=float, default=0.01)
    ap.add_argument("--iterations", type=int, default=2000)
    ap.add_argument("--widths", type=int, nargs="+", default=[64, 32])
    ap.add_argument("--optimizer", choices=("sgd", "adam"), default="adam")
    ap.add_argument("--inner-steps", type=int, default=1)
    ap.add_argument("--trials", type=int, default=300)
    args = ap.parse_args(argv)
    return 0 if run_setting(args) else 1


if __name__ == "__main__":
    raise SystemExit(main())
