"""Train the 10-member deep ensemble on synthetic scenes, distil a single-pass
student from it, and report the ensemble/student comparison.

    python scripts/run_toy_experiment.py --out runs/toy
"""

import argparse
import json
from pathlib import Path

import numpy as np

from emuformer.experiments import ToySetup, moving_average, run_toy
from emuformer.metrics import MetricsReport
from emuformer.model import save_checkpoint
from emuformer.plots import collect_panels, emit_plots
from emuformer.train import evaluate
from emuformer.uq import UQPredictor


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", type=Path, default=Path("runs/toy"))
    parser.add_argument("--members", type=int, default=10)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--plots", type=int, default=4, help="number of qualitative panels")
    args = parser.parse_args()

    setup = ToySetup(members=args.members, seed=args.seed)
    res = run_toy(setup)
    args.out.mkdir(parents=True, exist_ok=True)

    for m, r in enumerate(res.members):
        save_checkpoint(r.model, args.out / "teacher" / f"member_{m:02d}.pt")
    save_checkpoint(res.student.model, args.out / "student.pt", extra={"distilled": True})
    save_checkpoint(res.control.model, args.out / "control.pt")

    reports: dict[str, MetricsReport] = {
        "median member": None,
        "deep ensemble": res.teacher_report,
        "student": evaluate(UQPredictor([res.student.model]), res.val_set),
        "control": evaluate(UQPredictor([res.control.model]), res.val_set),
    }
    miou = [r.seg["miou"] for r in res.member_reports]
    rmse = [r.depth["rmse"] for r in res.member_reports]
    reports["median member"] = res.member_reports[int(np.argsort(miou)[len(miou) // 2])]
    for name, rep in reports.items():
        rep.save(args.out / f"{name.replace(' ', '_')}.json")

    summary = {
        "member_miou": miou, "member_rmse": rmse,
        "median_member_miou": float(np.median(miou)), "median_member_rmse": float(np.median(rmse)),
        "de_miou": res.teacher_report.seg["miou"], "de_rmse": res.teacher_report.depth["rmse"],
        "student_var_corr": res.student_corr, "control_var_corr": res.control_corr,
        "loss_ma_monotone": {
            name: bool(np.all(np.diff(moving_average(r.epoch_losses())) <= 0))
            for name, r in [*[(f"member_{i}", m) for i, m in enumerate(res.members)],
                            ("pretrained", res.pretrained), ("student", res.student), ("control", res.control)]
        },
        "timings_s": res.timings,
    }
    (args.out / "summary.json").write_text(json.dumps(summary, indent=2))

    panels = collect_panels(res.teacher, res.val_set, range(args.plots))
    emit_plots(panels, {k: v for k, v in reports.items() if k != "median member"}, args.out / "plots")
    student_panels = collect_panels(UQPredictor([res.student.model]), res.val_set, range(args.plots))
    emit_plots(student_panels, None, args.out / "plots_student")

    print(f"median member mIoU {summary['median_member_miou']:.4f}  DE mIoU {summary['de_miou']:.4f}")
    print(f"median member RMSE {summary['median_member_rmse']:.4f}  DE RMSE {summary['de_rmse']:.4f}")
    print(f"variance correlation with teacher: student {res.student_corr:.4f}  control {res.control_corr:.4f}")
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
