"""Depth-loss ablation at toy scale: distil one student per depth loss
(MSE, Huber, GNLL) from the same teacher and initialisation, then print the
comparison table.

    python scripts/ablation_depth_loss.py --members 4 --out runs/ablation
"""

import argparse
import json
from dataclasses import replace
from pathlib import Path

from emuformer.data import make_synthetic_dataset
from emuformer.experiments import ToySetup, format_table, run_depth_loss_ablation
from emuformer.train import member_seed, train, train_ensemble
from emuformer.uq import UQPredictor


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", type=Path, default=Path("runs/ablation"))
    parser.add_argument("--members", type=int, default=10)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    setup = ToySetup(members=args.members, seed=args.seed)
    train_set = make_synthetic_dataset(setup.n_train, seed=setup.seed)
    val_set = make_synthetic_dataset(setup.n_val, seed=setup.seed + 10_000)
    cfg = setup.config()
    teacher = UQPredictor([r.model for r in train_ensemble(cfg, train_set, members=setup.members)], "de")
    init = train(replace(cfg, seed=member_seed(cfg.seed, setup.members),
                         optimizer=replace(cfg.optimizer, epochs=setup.pretrain_epochs)), train_set).model

    rows, reports = run_depth_loss_ablation(setup, teacher, train_set, val_set, init)
    args.out.mkdir(parents=True, exist_ok=True)
    for name, rep in reports.items():
        rep.save(args.out / f"{name.lower()}.json")
    (args.out / "table.json").write_text(json.dumps(rows, indent=2))
    table = format_table(rows)
    (args.out / "table.md").write_text(table + "\n")
    print(table)


if __name__ == "__main__":
    main()
