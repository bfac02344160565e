"""Overfit eight open-ended samples, then decode with ground-truth and wrong contexts."""

import numpy as np

from repsnet.config import Config
from repsnet.data import SynthSpec, decode, generate_synthetic, make_dataset
from repsnet.decoder import embed_context, greedy_decode
from repsnet.metrics import corpus_eval
from repsnet.model import RepsNetModel


def main(max_epochs=1000, target=0.01):
    tr, ev, voc = generate_synthetic(SynthSpec(n_samples=8, open_fraction=1.0), 0)
    ds = make_dataset(list(tr) + list(ev), voc, "train")
    m = RepsNetModel(Config(vocab_size=len(voc), lr=3e-3, seed=0, augment=False))
    opt = m.make_optimizer()
    for epoch in range(1, max_epochs + 1):
        m.fit(ds, epochs=1, opt=opt)
        loss = m.teacher_forced_losses(ds, list(ds)).mean()
        if epoch % 25 == 0 or loss < target:
            print(f"epoch {epoch}: loss {loss:.5f}")
        if loss < target:
            break
    pairs = []
    for s in ds:
        _, fused = m._single(ds, s)
        ctx = embed_context(np.asarray([ds.answer_tokens(s)]), m.params)
        out = [t for t in greedy_decode(fused, ctx, m.params, m.dec_cfg, m.cfg.constraints()) if t > 3]
        ref = [t for t in s.answer_text if t > 3]
        pairs.append((out, ref))
        print(f"{s.id} {'ok ' if out == ref else 'bad'} {decode(out, voc)}")
    print("bleu:", {k: round(v, 4) for k, v in corpus_eval(pairs).as_dict().items()})
    answers = [ds.answer_tokens(s) for s in ds]
    rolled = answers[1:] + answers[:1]
    base = m.teacher_forced_losses(ds, list(ds))
    wrong = m.teacher_forced_losses(ds, list(ds), rolled)
    print("loss with own context:  ", np.round(base, 4))
    print("loss with rolled context:", np.round(wrong, 4))


if __name__ == "__main__":
    main()
