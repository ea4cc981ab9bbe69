"""Accuracy and springback RMSE against observed frame fraction L/N, for one or more trained checkpoints.

Pass checkpoints produced by ``mtbf-twin train`` (or ``train_default.py --checkpoint``); each is swept over
the test split of the default dataset, and the per-bucket medians across checkpoints are printed last.
"""
import argparse
import statistics

from mtbf_twin import train_eval as te
from mtbf_twin.gaf_codec import EncodingConfig
from mtbf_twin.mtl_model import load_checkpoint
from mtbf_twin.scenario_sim import SimConfig, build_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("checkpoints", nargs="+")
    ap.add_argument("--buckets", type=int, default=5)
    ap.add_argument("--cache", default=None)
    args = ap.parse_args()

    ds = build_dataset(SimConfig())
    sweeps = []
    for path in args.checkpoints:
        model = load_checkpoint(path, expect_mode="multi_task")
        data = te.prepare(ds, EncodingConfig(image_size=model.config.image_size), args.cache)
        rows = te.time_sweep(model, data.test, args.buckets)
        sweeps.append(rows)
        print(path)
        print(te.sweep_table(rows))

    if len(sweeps) > 1:
        print(f"median over {len(sweeps)} checkpoints")
        for k, row in enumerate(sweeps[0]):
            acc = statistics.median(sw[k].accuracy for sw in sweeps)
            err = statistics.median(sw[k].rmse for sw in sweeps)
            print(f"  ({row.low:.1f}, {row.high:.1f}]  n={row.count:<4d} accuracy {acc:.3f}  rmse {err:.4f}")


if __name__ == "__main__":
    main()
