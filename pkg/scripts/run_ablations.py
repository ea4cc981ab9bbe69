"""Run the encoding, regularization and MTL ablations on a generated dataset and write their tables.

The defaults reproduce the full studies (5 repeats for encoding and regularization, 1 for MTL); on one CPU
core that takes many hours at image size 64, so ``--image-size`` / ``--epochs`` / ``--count`` allow a
reduced-scale run.
"""
import argparse
import logging
from pathlib import Path

from mtbf_twin import train_eval as te
from mtbf_twin.gaf_codec import EncodingConfig
from mtbf_twin.mtl_model import ModelConfig
from mtbf_twin.scenario_sim import SimConfig, build_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="ablations")
    ap.add_argument("--study", choices=("encoding", "regularization", "mtl", "all"), default="all")
    ap.add_argument("--count", type=int, default=1150)
    ap.add_argument("--splits", default="850,150,150")
    ap.add_argument("--image-size", type=int, default=64)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--repeats", type=int, default=None, help="override repeats (5; 1 for mtl)")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--cache", default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    splits = tuple(int(v) for v in args.splits.split(","))
    ds = build_dataset(SimConfig(count=args.count, splits=splits))
    enc = EncodingConfig(image_size=args.image_size)
    mc = ModelConfig(image_size=args.image_size)
    tc = te.TrainConfig(epochs=args.epochs, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    studies = ("encoding", "regularization", "mtl") if args.study == "all" else (args.study,)
    for study in studies:
        repeats = args.repeats or (1 if study == "mtl" else 5)
        run = {"encoding": te.ablate_encoding, "regularization": te.ablate_regularization,
               "mtl": te.ablate_mtl}[study]
        result = run(ds, mc, tc, enc, repeats=repeats, cache_dir=args.cache)
        (out / f"ablate_{study}.csv").write_text(te.runs_csv(result.runs, include_time=True))
        (out / f"ablate_{study}.txt").write_text(result.report())
        print(result.report())


if __name__ == "__main__":
    main()
