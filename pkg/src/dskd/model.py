"""Teacher / encoder / embedding / decoder wiring for each architecture variant.

Architecture variants:

* ``DS``  - teacher distils into both the encoder and, through the embedding,
  the decoder. Inference compares teacher and decoder.
* ``T-E`` - teacher and encoder only.
* ``T-D`` - the embedding is computed from the teacher's own pyramid and fed to
  the decoder.
* ``E-D`` - no teacher. A randomly initialised, frozen encoder (built like the
  random teacher) is the reference the decoder distils from.
"""

from __future__ import annotations

from typing import Dict, List, Optional, Tuple

import torch
import torch.nn as nn
from torch import Tensor

from .backbone import (
    FeaturePyramid,
    ResNetPyramid,
    ShapeError,
    build_decoder,
    build_encoder,
    build_teacher,
    check_input,
    l2_normalize,
    seeded,
)
from .dfe import DeepestLevelProjection, FeatureEmbedding

VARIANTS = ("DS", "T-E", "T-D", "E-D")

# (reference, student) pairs that produce the encoder loss and the decoder loss
_LOSS_PAIRS: Dict[str, Dict[str, Tuple[str, str]]] = {
    "DS": {"e": ("teacher", "encoder"), "d": ("teacher", "decoder")},
    "T-E": {"e": ("teacher", "encoder")},
    "T-D": {"d": ("teacher", "decoder")},
    "E-D": {"d": ("encoder", "decoder")},
}
_INFERENCE_PAIR = {
    "DS": ("teacher", "decoder"),
    "T-E": ("teacher", "encoder"),
    "T-D": ("teacher", "decoder"),
    "E-D": ("encoder", "decoder"),
}


class DSKD(nn.Module):
    """Container for the networks of one variant.

    ``forward`` returns the l2-normalised pyramids keyed by network name. Only
    the networks the variant uses are built and run.
    """

    def __init__(
        self,
        teacher: Optional[ResNetPyramid],
        variant: str = "DS",
        dfe_enabled: bool = True,
        seed: int = 0,
        input_size: int = 256,
        lambda_l2: float = 0.1,
        sigma: float = 4.0,
    ) -> None:
        super().__init__()
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
        if variant != "E-D" and teacher is None:
            raise ValueError(f"variant {variant} needs a teacher")
        self.variant = variant
        self.dfe_enabled = dfe_enabled
        self.seed = seed
        self.input_size = input_size
        self.lambda_l2 = lambda_l2
        self.sigma = sigma

        # kept out of the module tree so its weights never reach state_dict/optimisers
        self._teacher = [teacher] if variant != "E-D" else [None]
        if variant == "E-D":
            # same construction as the random teacher: frozen, BN statistics calibrated
            self.encoder = build_teacher("random", seed=seed)
        elif variant in ("DS", "T-E"):
            self.encoder = build_encoder(seed)
        else:
            self.encoder = None
        if variant in ("DS", "T-D", "E-D"):
            factory = FeatureEmbedding if dfe_enabled else DeepestLevelProjection
            self.dfe = seeded(factory, seed + 1)
            self.decoder = build_decoder(seed + 2)
        else:
            self.dfe = None
            self.decoder = None

    @property
    def teacher(self) -> Optional[ResNetPyramid]:
        return self._teacher[0]

    @property
    def loss_pairs(self) -> Dict[str, Tuple[str, str]]:
        return _LOSS_PAIRS[self.variant]

    @property
    def inference_pair(self) -> Tuple[str, str]:
        return _INFERENCE_PAIR[self.variant]

    def parameter_groups(self) -> Dict[str, List[nn.Parameter]]:
        """Trainable parameters, split into the encoder and decoder(+embedding) groups."""
        groups: Dict[str, List[nn.Parameter]] = {}
        if self.variant in ("DS", "T-E"):
            groups["encoder"] = list(self.encoder.parameters())
        if self.decoder is not None:
            groups["decoder"] = list(self.dfe.parameters()) + list(self.decoder.parameters())
        return groups

    def saved_modules(self) -> Dict[str, nn.Module]:
        """Modules whose weights a checkpoint must carry for this variant."""
        out = {}
        for name in ("encoder", "dfe", "decoder"):
            module = getattr(self, name)
            if module is not None:
                out[name] = module
        return out

    def train(self, mode: bool = True) -> "DSKD":
        super().train(mode)
        # frozen networks keep their batch-norm statistics
        if self.teacher is not None:
            self.teacher.eval()
        if self.variant == "E-D":
            self.encoder.eval()
        return self

    def to(self, *args, **kwargs) -> "DSKD":
        super().to(*args, **kwargs)
        if self.teacher is not None:
            self.teacher.to(*args, **kwargs)
        return self

    def forward(self, x: Tensor, needed: Optional[Tuple[str, ...]] = None) -> Dict[str, FeaturePyramid]:
        """Run the networks and return their normalised pyramids.

        Args:
            x: image batch [B, 3, H, W].
            needed: restrict to these network names; defaults to every network
                appearing in a loss pair (training) or the inference pair.
        """
        check_input(x)
        if needed is None:
            names = {n for pair in self.loss_pairs.values() for n in pair}
            needed = tuple(names | set(self.inference_pair))
        feats: Dict[str, FeaturePyramid] = {}
        if "teacher" in needed or (self.variant == "T-D" and "decoder" in needed):
            with torch.no_grad():
                feats["teacher"] = l2_normalize(self.teacher(x))
        if self.encoder is not None and ("encoder" in needed or "decoder" in needed):
            if self.variant == "E-D":
                with torch.no_grad():
                    feats["encoder"] = l2_normalize(self.encoder(x))
            else:
                feats["encoder"] = l2_normalize(self.encoder(x))
        if "decoder" in needed:
            source = feats["teacher"] if self.variant == "T-D" else feats["encoder"]
            # decoder loss must not reach the encoder
            emb = self.dfe([f.detach() for f in source])
            decoded = self.decoder(emb)
            for ref, got in zip(source, decoded):
                if ref.shape != got.shape:
                    raise ShapeError(f"decoder level {tuple(got.shape)} does not match {tuple(ref.shape)}")
            feats["decoder"] = l2_normalize(decoded)
        return feats
