# A shortened desk-scale run of the initializer comparison: one teacher, one
# seed per student, a few hundred steps. Pass --full for the acceptance
# budget (5k teacher steps, 2k student steps, 3 seeds; hours on one core).
import argparse
import logging

from guide_init.experiment import (ABLATION_CELLS, ORDERING_CELLS, DeskExperiment, DeskSettings,
                                   mean_final_ppl, mean_initial_ppl)
from guide_init.training import gap_reduction

parser = argparse.ArgumentParser()
parser.add_argument("--workdir", default="desk_demo")
parser.add_argument("--full", action="store_true")
args = parser.parse_args()
logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

settings = DeskSettings() if args.full else DeskSettings(
    teacher_steps=1500, student_steps=400, eval_every=100, eval_batches=8, seeds=(0,))
exp = DeskExperiment(args.workdir, settings)
teacher = exp.teacher_ppl()
runs = exp.sweep(ORDERING_CELLS + tuple(c for c in ABLATION_CELLS if c not in ORDERING_CELLS))
baseline = mean_final_ppl(runs["random"])

print(f"\n{'cell':<18}{'step-0 ppl':>12}{'final ppl':>12}{'gap closed %':>14}")
for cell, logs in runs.items():
    gap = "" if cell == "random" else f"{gap_reduction(mean_final_ppl(logs), baseline, teacher):.1f}"
    print(f"{cell:<18}{mean_initial_ppl(logs):>12.2f}{mean_final_ppl(logs):>12.3f}{gap:>14}")
print(f"{'teacher':<18}{'':>12}{teacher:>12.3f}")
