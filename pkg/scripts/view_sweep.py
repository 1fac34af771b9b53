"""Validation accuracy as the number of dropout views V goes from 1 to 5."""
import argparse
import json

from bislu.experiments import run_view_sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--views", type=int, nargs="+", default=[1, 2, 3, 4, 5])
    ap.add_argument("--train", type=int, default=200)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--out", default="view_sweep.json")
    args = ap.parse_args()
    results = run_view_sweep(args.views, n_train=args.train, epochs=args.epochs)
    for r in results:
        v = r["validation"]
        print(f"V={r['views']}: val sent {v['sentence_accuracy']:.3f}  intent {v['intent_accuracy']:.3f}  "
              f"slot F1 {v['slot_f1']:.3f}  ({r['seconds']:.0f}s)")
    with open(args.out, "w") as fh:
        json.dump(results, fh, indent=2)


if __name__ == "__main__":
    main()
