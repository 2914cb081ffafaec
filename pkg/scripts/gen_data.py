"""Write the synthetic glyph datasets as IDX files plus a ready-to-run config.

The CLI consumes IDX pairs referenced from a key=value config, so this is
the one-time step before `python -m ptu.cli train-source / run / report`.
Everything is deterministic in --seed; rerunning overwrites the same bytes.
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from ptu.data import glyph_alphabet_suite, glyph_digits, save_idx

CONFIG_TEMPLATE = """\
setting={setting}
arch=rnn
rnn.hidden=128
methods=notl,ft,ptu,knn,rg
source.dataset=digits
target.dataset={target}
dataset.digits.images={data}/digits-images.idx
dataset.digits.labels={data}/digits-labels.idx
dataset.digits.classes=10
dataset.{target}.images={data}/{target}-images.idx
dataset.{target}.labels={data}/{target}-labels.idx
dataset.{target}.classes={classes}
train.lr=0.1
train.lr_candidates=0.1,0.03
train.batch_size=128
train.max_steps=2000
train.val_every=200
out=runs/{setting}
"""


def dump(ds, stem, out):
    images, labels = out / f"{stem}-images.idx", out / f"{stem}-labels.idx"
    save_idx(ds, images, labels)
    print(f"  {images.name}: {len(ds)} samples, {ds.class_count} classes")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="data", help="directory for IDX files and configs")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--image-hw", type=int, default=14,
                        help="square image side; 14 keeps the RNN demo to minutes")
    parser.add_argument("--alphabets", default="0",
                        help="comma list of alphabet indices 0-4, or 'all'")
    args = parser.parse_args()

    suite = glyph_alphabet_suite(seed=args.seed, image_hw=args.image_hw)
    wanted = range(len(suite)) if args.alphabets == "all" else \
        [int(tok) for tok in args.alphabets.split(",")]
    for i in wanted:
        if not 0 <= i < len(suite):
            parser.error(f"alphabet index {i} out of range 0-{len(suite) - 1}")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    print(f"writing {out}/")
    dump(glyph_digits(seed=args.seed, image_hw=args.image_hw), "digits", out)
    for i in wanted:
        ds = suite[i]
        stem = f"alphabet{i}"
        dump(ds, stem, out)
        cfg = out / f"{stem}.cfg"
        cfg.write_text(CONFIG_TEMPLATE.format(
            setting=stem, target=stem, data=out, classes=ds.class_count))
        print(f"  {cfg.name}: config for `python -m ptu.cli train-source/run --config {cfg}`")


if __name__ == "__main__":
    main()
