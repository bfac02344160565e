"""Vis / Vis+CE / Vis+CE+PC comparison on the synthetic corpus.

    python scripts/ablation.py --seeds 0 1 2 --epochs 100
"""

import argparse
import time

from repsnet.config import Config
from repsnet.data import SynthSpec, generate_synthetic
from repsnet.metrics import corpus_eval
from repsnet.model import RepsNetModel

VARIANTS = (("Vis", 0.0, False), ("Vis+CE", 1.0, False), ("Vis+CE+PC", 1.0, True))


def words(ids):
    return [int(t) for t in ids if int(t) > 3]


def run(seed, epochs, lr, concepts, samples):
    tr, ev, voc = generate_synthetic(SynthSpec(n_concepts=concepts, n_samples=samples,
                                               open_fraction=1.0), seed)
    out = {}
    for name, alpha, ctx in VARIANTS:
        m = RepsNetModel(Config(vocab_size=len(voc), lr=lr, epochs=epochs, alpha_l=alpha,
                                use_context=ctx, seed=seed))
        m.fit(tr)
        m.build_index(tr)
        pairs = [(words(m.infer_open(ev, s)[0]), words(s.answer_text)) for s in ev]
        out[name] = corpus_eval(pairs)
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--concepts", type=int, default=4)
    ap.add_argument("--samples", type=int, default=64)
    args = ap.parse_args()
    print(f"{'seed':>4} " + " ".join(f"{n:>10}" for n, *_ in VARIANTS) + "  ordered  secs")
    held = 0
    for seed in args.seeds:
        t = time.perf_counter()
        res = run(seed, args.epochs, args.lr, args.concepts, args.samples)
        b1 = [res[n].b1 for n, *_ in VARIANTS]
        ok = b1[2] >= b1[1] >= b1[0]
        held += ok
        print(f"{seed:>4} " + " ".join(f"{v:>10.4f}" for v in b1) +
              f"  {str(ok):>7}  {time.perf_counter() - t:.0f}")
    print(f"ordering held on {held}/{len(args.seeds)} seeds (B1)")


if __name__ == "__main__":
    main()
