"""Analytic vs central-difference gradients on a small fixed instance."""

from __future__ import annotations

import numpy as np

from . import captioner as cap
from .autodiff import finite_difference_gradient, relative_error
from .mil import MILModel, RegionBag

TOLERANCE = 1e-4


def gradcheck_report(embed=4, hidden=4, vocab=5, seed=0, epsilon=1e-5):
    """``(group, parameter, max relative error)`` for every variant and both MIL forms.

    The caption batch holds a one-word sentence ending in EOS and a
    single-token target of unequal length, so padding is exercised;
    parameters sit a small random step away from initialisation.
    """
    rng = np.random.default_rng(seed)
    dims = cap.ModelDims(vocab=vocab, video=3, attr_image=3, attr_video=2, embed=embed, hidden=hidden)
    batch = [cap.Example(rng.normal(size=3), rng.random(3), rng.random(2), [3, 1]),
             cap.Example(rng.normal(size=3), rng.random(3), rng.random(2), [4])]
    rows = []
    for variant in cap.VARIANTS:
        model = cap.CaptionModel(dims, variant, seed=seed)
        params = {k: p + 0.1 * rng.standard_normal(p.shape) for k, p in model.params.items()}
        _, grads = model.loss_and_grads(batch, params)
        fd = finite_difference_gradient(lambda p: model.loss_and_grads(batch, p, grads=False)[0], params, epsilon)
        rows.extend((f"caption/{variant}", name, relative_error(grads[name], fd[name])) for name in params)
    for domain, n_frames in (("image", 1), ("video", 3)):
        bags = [RegionBag(rng.normal(size=(n_frames, 4, 2)), rng.integers(0, 2, size=3)) for _ in range(2)]
        params = {"W": rng.normal(size=(3, 2)), "b": rng.normal(size=3) - 1.0}
        model = MILModel()
        _, grads = model.loss_and_grads(bags, params)
        fd = finite_difference_gradient(lambda p: model.loss(bags, p), params, epsilon)
        rows.extend((f"mil/{domain}", name, relative_error(grads[name], fd[name])) for name in params)
    return rows
