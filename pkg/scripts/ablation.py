"""Five-loss mixture against the supervised-only baseline on a 500-utterance corpus, three seeds.

The report is written even when the full mixture loses; the exit status flags it.
"""
import argparse
import json

from bislu.experiments import run_ablation


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--grammar", default="varied", choices=["compact", "varied"])
    ap.add_argument("--out", default="ablation.json")
    args = ap.parse_args()

    def show(r):
        print(f"{r['variant']:9s} seed {r['seed']}: val sent {r['validation']['sentence_accuracy']:.3f}  "
              f"test sent {r['test']['sentence_accuracy']:.3f}  ({r['seconds']:.0f}s)", flush=True)

    report = run_ablation(args.seeds, epochs=args.epochs, grammar=args.grammar, on_result=show)
    with open(args.out, "w") as fh:
        json.dump(report, fh, indent=2)
    m = report["mean_sentence_accuracy"]
    print(f"mean val sent: full {m['full']['validation']:.3f} vs baseline {m['baseline']['validation']:.3f}"
          f" -> {'PASS' if report['passed'] else 'FAIL (full mixture below baseline)'}")
    return 0 if report["passed"] else 1


if __name__ == "__main__":
    raise SystemExit(main())
