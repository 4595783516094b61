"""Finite-difference verification battery over every differentiable stage of
the objective: similarity, normalization, attention, gating, the stacked
encoder, the decoder, pooling, both loss heads, and the assembled total.

Runs in float64 regardless of the ambient precision. Each stage is wrapped
with a scalar head (sum of squares) and checked on `instances` random small
problems; the returned report maps stage name to worst relative error.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import alignment as al
from . import losses
from .gradcheck import grad_check
from .model import ModelConfig, Summarizer
from .representation import SOS, EOS, FragmentFeatures

STAGES = (
    "similarity",
    "normalize",
    "attend",
    "gate",
    "encoder",
    "decoder",
    "pool",
    "info_nce",
    "nll",
    "total_loss",
)


def _sq(t):
    return ad.sum_(ad.mul(t, t))


def _frags(arr, modality="text"):
    return FragmentFeatures(arr if isinstance(arr, ad.Tensor) else ad.tensor(arr),
                            np.ones(np.asarray(arr.data if isinstance(arr, ad.Tensor) else arr).shape[:-1], dtype=bool),
                            modality)


def _micro_model(rng) -> Summarizer:
    cfg = ModelConfig(
        vocab_size=7,
        width=4,
        alignment_layers=1,
        decoder_layers=1,
        decoder_heads=2,
        decoder_ff=8,
        dropout=0.0,
        patch_size=2,
        image_channels=1,
        max_text_len=8,
        max_summary_len=6,
    )
    return Summarizer(cfg, rng)


def _check_stage(stage: str, rng: np.random.Generator) -> float:
    n, m, d = int(rng.integers(2, 5)), int(rng.integers(2, 5)), int(rng.integers(3, 7))
    if stage == "similarity":
        x = ad.tensor(rng.normal(size=(n, d)), requires_grad=True)
        y = ad.tensor(rng.normal(size=(m, d)), requires_grad=True)

        def f(xt, yt):
            return _sq(al.cosine_similarity_matrix(_frags(xt), _frags(yt)))

        return grad_check(f, [x, y]).max_rel_error

    if stage == "normalize":
        s = ad.tensor(rng.uniform(-1, 1, size=(n, m)), requires_grad=True)
        xm, ym = np.ones(n, bool), np.ones(m, bool)

        def f(st):
            return _sq(al.normalize_similarity(st, xm, ym, shift=-0.15))

        return grad_check(f, [s]).max_rel_error

    if stage == "attend":
        s = ad.tensor(rng.uniform(0, 1, size=(n, m)), requires_grad=True)
        y = ad.tensor(rng.normal(size=(m, d)), requires_grad=True)

        def f(st, yt):
            out, _ = al.attend(st, _frags(yt), sharpness=6.0)
            return _sq(out)

        return grad_check(f, [s, y]).max_rel_error

    if stage == "gate":
        gate = al.FusionGate("g", d, rng)
        x = ad.tensor(rng.normal(size=(n, d)), requires_grad=True)
        c = ad.tensor(rng.normal(size=(n, d)), requires_grad=True)

        def f(xt, ct, *params):
            return _sq(al.gated_update(xt, ct, gate))

        return grad_check(f, [x, c] + gate.parameters()).max_rel_error

    if stage == "encoder":
        model = _micro_model(rng)
        tv = ad.tensor(rng.normal(size=(3, 4)), requires_grad=True)
        iv = ad.tensor(rng.normal(size=(2, 4)), requires_grad=True)

        def f(t, i):
            enc = model.encode(_frags(t), _frags(i, "image"))
            return ad.add(
                _sq(enc.text_aligned[-1].features),
                ad.add(_sq(enc.image_aligned[-1].features), _sq(enc.text_states[-1].features)),
            )

        return grad_check(f, [tv, iv]).max_rel_error

    if stage == "decoder":
        model = _micro_model(rng)
        memory = ad.tensor(rng.normal(size=(3, 4)), requires_grad=True)
        target = np.array([SOS, 4, 5, EOS])

        def f(mem, *params):
            enc_like = type("E", (), {})()
            enc_like.text_aligned = [al.AlignmentFeatures(mem, np.ones(3, bool))]
            logits = model.decode_train(enc_like, target)
            return _sq(logits)

        inputs = [memory] + [p for p in model.parameters()
                             if p.name.startswith(("decoder/", "embed/tokens"))]
        return grad_check(f, inputs).max_rel_error

    if stage == "pool":
        x = ad.tensor(rng.normal(size=(n, d)), requires_grad=True)
        mask = np.ones(n, bool)
        if n > 2:
            mask[-1] = False

        def f_mean(xt):
            return _sq(losses.pool(FragmentFeatures(xt, mask), "mean"))

        def f_max(xt):
            return _sq(losses.pool(FragmentFeatures(xt, mask), "max"))

        err = grad_check(f_mean, [x]).max_rel_error
        x2 = ad.tensor(rng.normal(size=(n, d)), requires_grad=True)
        return max(err, grad_check(f_max, [x2]).max_rel_error)

    if stage == "info_nce":
        b = int(rng.integers(2, 5))
        a = ad.tensor(rng.normal(size=(b, d)), requires_grad=True)
        p = ad.tensor(rng.normal(size=(b, d)), requires_grad=True)

        def f(at, pt):
            return losses.info_nce(at, pt, temperature=0.5)

        return grad_check(f, [a, p]).max_rel_error

    if stage == "nll":
        length, vocab = int(rng.integers(2, 5)), int(rng.integers(4, 8))
        logits = ad.tensor(rng.normal(size=(length, vocab)), requires_grad=True)
        ids = rng.integers(0, vocab, size=length)
        mask = np.ones(length, bool)

        def f(lt):
            return losses.sequence_nll(lt, ids, mask)

        return grad_check(f, [logits]).max_rel_error

    if stage == "total_loss":
        model = _micro_model(rng)
        text_ids = np.array([[SOS, 4, 5, EOS], [SOS, 6, EOS, 1]])
        text_mask = np.array([[True] * 4, [True, True, True, False]])
        images = rng.random((2, 1, 4, 4))
        summary_ids = np.array([[SOS, 4, EOS], [SOS, 5, EOS]])
        summary_mask = np.ones((2, 3), dtype=bool)

        def f(*params):
            text = model.embed_text_batch(text_ids, text_mask)
            image = model.embed_image_batch(images)
            enc = model.encode(text, image)
            i2t = losses.layered_info_nce(enc.image_aligned, enc.text_original, 0.1)
            t2i = losses.layered_info_nce(enc.text_aligned, enc.image_original, 0.1)
            logits = model.decode_train(enc, summary_ids[:, :-1], summary_mask[:, :-1])
            gene = losses.sequence_nll(logits, summary_ids[:, 1:], summary_mask[:, 1:])
            total, _ = losses.total_loss(
                gene, i2t, t2i, 0.3, 0.3, batch_size=2,
                params=model.parameters(), weight_decay=1e-3,
            )
            return total

        return grad_check(f, model.parameters()).max_rel_error

    raise ValueError(f"unknown stage {stage!r}")


def gradient_battery(instances: int = 20, seed: int = 0, stages=STAGES) -> dict[str, float]:
    """Worst relative FD error per stage over `instances` random problems."""
    report = {}
    with ad.using_dtype("float64"):
        for stage in stages:
            rng = np.random.default_rng(np.random.SeedSequence([seed, hash(stage) % (2**31)]))
            worst = 0.0
            for _ in range(instances):
                worst = max(worst, _check_stage(stage, rng))
            report[stage] = worst
    return report
