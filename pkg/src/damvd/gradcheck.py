"""Full-pipeline finite-difference checks over encoder + decoder parameters."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .data import build_vocab, generate_dataset
from .decoder import nll_loss
from .encoders import collate, encode
from .model import UNIT_NAMES, VARIANTS, DamModel, ModelConfig

# Default init leaves some deep paths with gradients near 1e-9, below the
# central-difference noise floor; checks redraw every weight at this scale.
CHECK_SCALE = 0.5


def randomize(model: DamModel, scale: float = CHECK_SCALE, seed: int = 0) -> DamModel:
    rng = np.random.default_rng(seed)
    for p in model:
        p.data[...] = rng.normal(0.0, scale, size=p.shape)
    return model


def pipeline_check(
    variant: str,
    units: str,
    hidden: int = 8,
    steps: int = 3,
    seed: int = 1,
    max_entries: int | None = 24,
    step: float = 1e-5,
    tolerance: float = 1e-4,
) -> ad.GradCheckReport:
    """Gradient check of encode + ``steps`` teacher-forced decode steps.

    Runs in double precision on a small synthetic batch, covering every
    parameter tensor of the model.
    """
    ds = generate_dataset(seed, n_images=3, rounds_per_dialogue=3, n_candidates=4)
    vocab = build_vocab(ds)
    examples = ds.examples()[2:5]
    batch = collate(examples, vocab)
    rng = np.random.default_rng(seed)
    targets = [list(rng.integers(4, len(vocab), size=steps - 1)) for _ in examples]
    config = ModelConfig(len(vocab), embed_dim=hidden, hidden=hidden, variant=variant, units=units)
    model = randomize(DamModel.init(config, seed=seed, dtype=np.float64), seed=seed)

    def loss():
        return nll_loss(model, encode(model, batch), targets)

    return ad.finite_diff_check(loss, model.params, step=step, tolerance=tolerance, max_entries=max_entries, seed=seed)


def check_all(hidden: int = 8, steps: int = 3, seed: int = 1, max_entries: int | None = 24, tolerance: float = 1e-4):
    """Run :func:`pipeline_check` for every encoder variant and unit configuration."""
    return {
        (v, u): pipeline_check(v, u, hidden, steps, seed, max_entries, tolerance=tolerance)
        for v in VARIANTS
        for u in UNIT_NAMES
    }
