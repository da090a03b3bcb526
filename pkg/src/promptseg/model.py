"""Full episodic segmentation model.

Wires the frozen encoder, the anchor transformation, the prompt
generator, and the mask decoder into a single forward pass over an
episode. Ablation variants toggle the anchor transformation (features
pass through raw) and the prompt generator (decoder runs on zero
prompts); the prediction-mask matching mode replaces cycle matching with
a two-pass scheme whose first pass uses support-only anchors.
"""

from __future__ import annotations

import numpy as np

from promptseg.anchor_transform import (PrototypeMatrix, pm_map_prototypes,
                                        transform_episode)
from promptseg.config import RunConfig, validate
from promptseg.encoder import FrozenEncoder, MultiLevelFeatures
from promptseg.episodes import Episode, downsample_mask
from promptseg.mask_decoder import MaskDecoder
from promptseg.prompt_gen import PromptGenerator
from promptseg.tensor import (Parameter, Tensor, bilinear_resize, no_grad,
                              sigmoid, use_dtype)

PARAM_INIT_STREAM = 9021   # derivation tag for the parameter init rng


def _empty_pseudo(c: int, dtype) -> PrototypeMatrix:
    return PrototypeMatrix(Tensor(np.zeros(c, dtype=dtype)),
                           Tensor(np.zeros(c, dtype=dtype)),
                           fg_empty=True, bg_empty=True)


class SegModel:
    def __init__(self, cfg: RunConfig):
        validate(cfg)
        self.cfg = cfg
        self.dtype = np.float64 if cfg.train.precision == "float64" else np.float32
        self.encoder = FrozenEncoder(cfg.encoder)
        c_mid, _, c_high = cfg.encoder.channels
        self.use_dpat = cfg.dpat.enabled
        self.use_mpg = cfg.mpg.enabled
        rng = np.random.default_rng([cfg.train.seed, PARAM_INIT_STREAM])
        with use_dtype(self.dtype):
            if self.use_dpat:
                self.anchor_mid = Parameter("anchor_mid", rng.standard_normal((c_mid, 2)))
                self.anchor_high = Parameter("anchor_high", rng.standard_normal((c_high, 2)))
            else:
                self.anchor_mid = self.anchor_high = None
            if self.use_mpg:
                self.mpg = PromptGenerator(cfg.mpg, c_mid, c_high, rng)
            else:
                self.mpg = None
            self.decoder = MaskDecoder(cfg.decoder, cfg.mpg.output_channels, c_high, rng)
        self._feature_cache = {}

    def params(self):
        out = []
        if self.use_dpat:
            out += [self.anchor_mid, self.anchor_high]
        if self.use_mpg:
            out += self.mpg.params()
        return out + self.decoder.params()

    def param_count(self) -> int:
        return sum(int(np.prod(p.data.shape)) for p in self.params())

    def features(self, sample) -> MultiLevelFeatures:
        cached = self._feature_cache.get(sample.uid)
        if cached is None:
            with no_grad():
                cached = self.encoder.extract(sample.image, dtype=self.dtype)
            self._feature_cache[sample.uid] = cached
        return cached

    def _prompts(self, feats_s, masks, feats_q):
        if self.use_mpg:
            out = self.mpg.generate(feats_s, masks, feats_q)
            return out.sparse, out.dense
        k = self.cfg.mpg.sparse_count
        c_o = self.cfg.mpg.output_channels
        h, w = feats_q.spatial
        return (Tensor(np.zeros((k, c_o), dtype=self.dtype)),
                Tensor(np.zeros((c_o, h, w), dtype=self.dtype)))

    def _decode(self, feats_s, masks, feats_q) -> Tensor:
        sparse, dense = self._prompts(feats_s, masks, feats_q)
        return self.decoder(sparse, dense, feats_q.f3)

    def forward(self, episode: Episode) -> Tensor:
        with use_dtype(self.dtype):
            feats_s = [self.features(s) for s in episode.support]
            feats_q = self.features(episode.query)
            h, w = feats_q.spatial
            masks = [downsample_mask(s.mask, (h, w)).astype(self.dtype)
                     for s in episode.support]
            if not self.use_dpat:
                return self._decode(feats_s, masks, feats_q)
            dpat = self.cfg.dpat
            if dpat.ccs_mode == "pm-map":
                override = self._prediction_pseudo(feats_s, masks, feats_q)
                result = transform_episode(feats_s, masks, feats_q,
                                           self.anchor_mid, self.anchor_high,
                                           dpat, pseudo_override=override)
            else:
                result = transform_episode(feats_s, masks, feats_q,
                                           self.anchor_mid, self.anchor_high, dpat)
            return self._decode(result.support, masks, result.query)

    def _prediction_pseudo(self, feats_s, masks, feats_q):
        """First pass with support-only anchors produces a coarse query
        mask; thresholded, it pools pseudo prototypes for the second pass."""
        h, w = feats_q.spatial
        with no_grad():
            empties = [_empty_pseudo(feats_q.levels[i].shape[0], self.dtype)
                       for i in range(3)]
            first = transform_episode(feats_s, masks, feats_q,
                                      self.anchor_mid, self.anchor_high,
                                      self.cfg.dpat, pseudo_override=empties)
            logits = self._decode(first.support, masks, first.query)
            probs = sigmoid(logits)
            coarse = bilinear_resize(probs, (h, w)).data
        return [pm_map_prototypes(coarse, feats_q.levels[i]) for i in range(3)]

    def predict(self, episode: Episode) -> np.ndarray:
        """Binary query mask at ground-truth resolution."""
        with no_grad():
            logits = self.forward(episode)
            gt_shape = episode.query.mask.shape
            if logits.shape != gt_shape:
                logits = bilinear_resize(logits, gt_shape)
            return sigmoid(logits).data > 0.5
