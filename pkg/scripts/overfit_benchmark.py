"""50-utterance overfit benchmark: 2-layer d=64 encoder, five losses, three views, 200 epochs.

    python scripts/overfit_benchmark.py --corpus-seeds 0 1 2 --out overfit.json
"""
import argparse
import json

from bislu.experiments import run_overfit


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--corpus-seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--out", default=None, help="write all results here as JSON")
    args = ap.parse_args()
    results = []
    for seed in args.corpus_seeds:
        res = run_overfit(seed)
        results.append(res)
        print(f"corpus seed {seed}: train sent {res['train']['sentence_accuracy']:.3f}  "
              f"val sent {res['validation']['sentence_accuracy']:.3f}  best epoch {res['best_epoch']}  "
              f"{res['seconds']:.0f}s  {'PASS' if res['passed'] else 'FAIL'}", flush=True)
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(results, fh, indent=2)
    return 0 if all(r["passed"] for r in results) else 1


if __name__ == "__main__":
    raise SystemExit(main())
