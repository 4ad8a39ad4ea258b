"""Run the three desk-scale experiments and collect both result tables.

    python scripts/run_all.py [--only le,etc,avih] [--root runs]

Completed stages are skipped on re-runs, so an interrupted run can simply be
restarted. Total CPU time is around an hour on one core.
"""

import argparse
import logging
import os

from pek.harness import ExperimentConfig, emit_report, load_report, run_experiment

HERE = os.path.dirname(os.path.abspath(__file__))


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--only", default="le,etc,avih")
    ap.add_argument("--root", default="runs")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    results = {}
    for name in args.only.split(","):
        cfg = ExperimentConfig.load(os.path.join(HERE, "configs", f"desk_{name}.yaml"))
        results[name] = run_experiment(cfg, output_root=os.path.join(args.root, cfg.name))

    lpips_reports = [load_report(results[n].outputs[s]["report"])
                     for n in ("le", "etc") if n in results
                     for s in ("evaluate", "evaluate_autoencoder") if s in results[n].outputs]
    if lpips_reports:
        for path in emit_report(lpips_reports, "table2", args.root):
            print(f"wrote {path}")
    if "avih" in results:
        for path in results["avih"].outputs["table1"]["tables"]:
            print(f"wrote {path}")


if __name__ == "__main__":
    main()
