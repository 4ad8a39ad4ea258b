"""Plot training curves and key-wise deltas from a finished run directory.

    python scripts/make_figures.py runs/desk-avih
"""

import json
import os
import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def main(run_dir):
    hist_path = os.path.join(run_dir, "train", "history.json")
    with open(hist_path) as fh:
        history = json.load(fh)["history"]
    fig, ax = plt.subplots(1, 2, figsize=(9, 3.2))
    epochs = [h["epoch"] for h in history]
    ax[0].plot(epochs, [h["g"] for h in history], label="train L1")
    if "val_l1" in history[0]:
        ax[0].plot(epochs, [h["val_l1"] for h in history], label="val L1")
    ax[0].set_xlabel("epoch")
    ax[0].legend()
    ax[1].plot(epochs, [h["adv"] for h in history], label="adversarial")
    ax[1].set_xlabel("epoch")
    ax[1].legend()
    fig.tight_layout()
    out = os.path.join(run_dir, "training_curves.png")
    fig.savefig(out, dpi=120)
    print(f"wrote {out}")

    for entry in sorted(os.listdir(run_dir)):
        rep = os.path.join(run_dir, entry, "report.json")
        if os.path.isfile(rep):
            with open(rep) as fh:
                deltas = json.load(fh)["metadata"].get("deltas", {})
            for label, d in deltas.items():
                print(f"{entry} {label}: " + " ".join(f"d_{k}={v:+.3f}" for k, v in d.items()))


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "runs/desk-avih")
