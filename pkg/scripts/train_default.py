"""Train the default multi-task model on the default dataset and report test metrics and the time sweep."""
import argparse
import logging
import time

from mtbf_twin import train_eval as te
from mtbf_twin.gaf_codec import EncodingConfig
from mtbf_twin.mtl_model import ModelConfig, save_checkpoint
from mtbf_twin.scenario_sim import SimConfig, build_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0, help="training seed (init and shuffling)")
    ap.add_argument("--data-seed", type=int, default=SimConfig().seed, help="dataset seed")
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--image-size", type=int, default=64)
    ap.add_argument("--cache", default=None)
    ap.add_argument("--checkpoint", default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    t0 = time.perf_counter()
    ds = build_dataset(SimConfig(seed=args.data_seed))
    data = te.prepare(ds, EncodingConfig(image_size=args.image_size), args.cache)
    print(f"data ready in {time.perf_counter() - t0:.1f}s")
    model, history, m = te.run_training(data, ModelConfig(image_size=args.image_size),
                                        te.TrainConfig(epochs=args.epochs, seed=args.seed))
    print(f"test accuracy {m.accuracy:.4f}  binary {m.binary_accuracy:.4f}  rmse {m.rmse:.4f}  "
          f"train time {m.train_seconds:.0f}s  best epoch {model.epoch}")
    print(m.confusion)
    print(te.sweep_table(te.time_sweep(model, data.test)))
    if args.checkpoint:
        save_checkpoint(model, args.checkpoint)


if __name__ == "__main__":
    main()
