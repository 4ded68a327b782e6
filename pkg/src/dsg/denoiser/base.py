"""Clean-state predictor contract shared by the exact tabular oracle and the
trainable message-passing network."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..graph import pad_batch


@dataclass(frozen=True, eq=False)
class DenoiserOutput:
    """Clean-state distribution families for one state or a batch.

    obj_probs   (..., N, k_obj)      distributions over object labels (no mask slot)
    edge_probs  (..., N, N, 2)       per-pair Bernoulli over {0, 1}
    rel_probs   (..., N, N, k_rel)   semantic-relation distributions, defined on
                                     every pair; consumed only where gating allows
    edge_logits (..., N, N, 2)       raw edge scores retained for head conditioning
    box_preds   (..., N, 4) | None   cxcywh in [0, 1]
    """

    obj_probs: np.ndarray
    edge_probs: np.ndarray
    rel_probs: np.ndarray
    edge_logits: np.ndarray
    box_preds: np.ndarray | None = None

    def squeeze(self):
        return DenoiserOutput(
            self.obj_probs[0], self.edge_probs[0], self.rel_probs[0],
            self.edge_logits[0],
            None if self.box_preds is None else self.box_preds[0],
        )


class Denoiser:
    """Base class: implementations provide ``predict_batch``."""

    def predict_batch(self, batch, t):
        raise NotImplementedError

    def predict(self, state, t):
        """Single-state convenience wrapper around ``predict_batch``."""
        return self.predict_batch(pad_batch([state]), t).squeeze()
