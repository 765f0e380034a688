"""scikit-learn style wrappers: pre-training, behavior cloning and grounding.

The estimators hold hyperparameters only in ``__init__`` and put everything
learned on trailing-underscore attributes, so ``get_params``/``set_params``
and ``sklearn.base.clone`` work as usual.
"""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .adapt.policy import AGGREGATION_MODES, Demos, FeaturePolicy, FrozenFeatures, train_bc_policy
from .adapt.reg import RegSample, adapt_reg_head, average_precision
from .config import ConfigError, DataConfig, ModelConfig, TrainConfig
from .data import ValidationError, default_vocabulary
from .encoder import MultimodalEncoder
from .objective import box_iou
from .pretrain import InteractionModel, evaluate_pretraining, load_model, run_pretraining
from .validation import check_images, check_instructions, check_proprio, check_triplets


def _resolve_encoder(encoder) -> MultimodalEncoder:
    if isinstance(encoder, InteractionPretrainer):
        check_is_fitted(encoder, "model_")
        return encoder.model_.encoder
    if isinstance(encoder, InteractionModel):
        return encoder.encoder
    if isinstance(encoder, MultimodalEncoder):
        return encoder
    if isinstance(encoder, str):
        return load_model(encoder)[0].encoder
    raise ValidationError(
        f"encoder must be a fitted InteractionPretrainer, an InteractionModel, a "
        f"MultimodalEncoder or a checkpoint path, got {type(encoder).__name__}")


class InteractionPretrainer(TransformerMixin, BaseEstimator):
    """Pre-trains the interaction model on keyframe triplets.

    ``fit`` takes a sequence of :class:`KeyframeTriplet`; ``transform`` maps raw
    uint8 frames to frozen aggregated embeddings; ``predict`` returns the
    predicted transition frame and box given (initial, final) inputs.
    """

    def __init__(self, model_config=None, p: float = 0.5, lr: float = 1e-3, epochs: int = 20,
                 batch_size: int = 16, weight_decay: float = 0.05, decoder_mode: str = "full",
                 causality: str = "deformable", modality: str = "vision_language", seed: int = 0,
                 out_dir=None):
        self.model_config = model_config
        self.p = p
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.decoder_mode = decoder_mode
        self.causality = causality
        self.modality = modality
        self.seed = seed
        self.out_dir = out_dir

    def _train_config(self) -> TrainConfig:
        mc = self.model_config
        if mc is None:
            mc = ModelConfig()
        elif isinstance(mc, dict):
            mc = ModelConfig(**mc)
        elif not isinstance(mc, ModelConfig):
            raise ConfigError(f"model_config must be a ModelConfig or dict, got {type(mc).__name__}")
        return TrainConfig(model=mc, data=DataConfig(p=self.p, image_size=mc.image_size, seed=self.seed),
                           lr=self.lr, epochs=self.epochs, batch_size=self.batch_size,
                           weight_decay=self.weight_decay, decoder_mode=self.decoder_mode,
                           causality=self.causality, modality=self.modality, seed=self.seed)

    def fit(self, X, y=None):
        triplets = check_triplets(X)
        cfg = self._train_config()
        vocab = default_vocabulary(cfg.model.vocab_seed)
        self.model_, self.records_, self.checkpoint_path_ = run_pretraining(
            cfg, triplets, self.out_dir, vocab)
        self.config_ = cfg
        self.model_.eval()
        return self

    @torch.no_grad()
    def transform(self, X) -> np.ndarray:
        """Aggregated visual embedding of each raw frame, shape (N, d)."""
        check_is_fitted(self, "model_")
        _, v_agg = FrozenFeatures(self.model_.encoder)(check_images(X))
        return v_agg.numpy()

    @torch.no_grad()
    def predict(self, X):
        """Returns (frames (N, 3, H, W) normalized, boxes (N, 4)) for each triplet's transition."""
        check_is_fitted(self, "model_")
        from .pretrain import _transition_batch

        triplets = check_triplets(X)
        cfg = self.model_.cfg
        batch = _transition_batch(triplets, cfg.image_size, self.model_.vocab, cfg.max_text_len)
        out = self.model_(batch)
        frame = None if out["frame"] is None else out["frame"].numpy()
        box = None if out["box"] is None else out["box"].numpy()
        return frame, box

    def evaluate(self, X) -> dict:
        check_is_fitted(self, "model_")
        return evaluate_pretraining(self.model_, check_triplets(X))

    def score(self, X, y=None) -> float:
        """Negative held-out transition-frame MSE (higher is better)."""
        report = self.evaluate(X)
        if report["pred_mse"] is None:
            raise ValidationError(f"decoder_mode={self.decoder_mode!r} predicts no frames")
        return -report["pred_mse"]


class BehaviorCloningPolicy(RegressorMixin, BaseEstimator):
    """Policy head trained on top of a frozen encoder from expert demonstrations."""

    def __init__(self, encoder=None, mode: str = "proprio_conditioned_map", steps: int = 2000,
                 batch_size: int = 64, lr: float = 1e-3, seed: int = 0):
        self.encoder = encoder
        self.mode = mode
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed

    def fit(self, X: Demos, y=None):
        if not isinstance(X, Demos):
            raise ValidationError(f"fit expects a Demos record, got {type(X).__name__}")
        if self.mode not in AGGREGATION_MODES:
            raise ValidationError(f"mode must be one of {AGGREGATION_MODES}, got {self.mode!r}")
        if len(X.actions) == 0:
            raise ValidationError("no demonstration steps")
        self.features_ = FrozenFeatures(_resolve_encoder(self.encoder))
        self.head_, self.losses_ = train_bc_policy(self.features_, X, self.mode, steps=self.steps,
                                                   batch_size=self.batch_size, lr=self.lr,
                                                   seed=self.seed)
        self.policy_ = FeaturePolicy(self.features_, self.head_)
        return self

    def predict(self, X, proprio=None) -> np.ndarray:
        """Actions (N, 2) for raw frames ``X`` and proprio rows (x, y, contact)."""
        check_is_fitted(self, "head_")
        frames = check_images(X)
        if proprio is None:
            raise ValidationError("predict needs proprio alongside the frames")
        return self.policy_.act(frames, check_proprio(proprio, len(frames)))

    def act(self, frames, proprio) -> np.ndarray:
        return self.predict(frames, proprio)

    def score(self, X: Demos, y=None) -> float:
        """Negative action MSE on a demonstration set."""
        pred = self.predict(X.frames, X.proprio)
        return -float(((pred - X.actions) ** 2).mean())


class ReferringGrounder(RegressorMixin, BaseEstimator):
    """Grounding head (MAP over visual + language rows, then box MLP) on a frozen encoder."""

    def __init__(self, encoder=None, use_aggregated: bool = False, epochs: int = 10,
                 batch_size: int = 32, lr: float = 1e-3, seed: int = 0):
        self.encoder = encoder
        self.use_aggregated = use_aggregated
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed

    def fit(self, X, y=None):
        samples = list(X)
        if not samples or not all(isinstance(s, RegSample) for s in samples):
            raise ValidationError("fit expects a non-empty sequence of RegSample")
        encoder = _resolve_encoder(self.encoder)
        self.head_, self.inputs_, self.losses_ = adapt_reg_head(
            encoder, encoder.vocab, samples, self.use_aggregated, epochs=self.epochs,
            batch_size=self.batch_size, lr=self.lr, seed=self.seed)
        return self

    @torch.no_grad()
    def predict(self, X, instructions=None) -> np.ndarray:
        """Boxes (N, 4) as (cx, cy, w, h) for raw images and their instructions."""
        check_is_fitted(self, "head_")
        images = check_images(X)
        texts = check_instructions(instructions, len(images))
        visual, lang, mask = self.inputs_(list(images), texts)
        return self.head_(visual, lang, mask).numpy()

    def score(self, X, y=None) -> float:
        """AP at IoU 0.5 on a set of RegSample."""
        report = self.evaluate(X)
        return report["ap50"]

    def evaluate(self, X) -> dict:
        samples = list(X)
        pred = self.predict(np.stack([s.image for s in samples]), [s.instruction for s in samples])
        target = np.stack([s.box.as_array() for s in samples])
        return average_precision(torch.from_numpy(pred), torch.from_numpy(target).to(torch.float32))

    def iou(self, X) -> np.ndarray:
        samples = list(X)
        pred = self.predict(np.stack([s.image for s in samples]), [s.instruction for s in samples])
        target = np.stack([s.box.as_array() for s in samples]).astype(np.float32)
        return box_iou(torch.from_numpy(pred), torch.from_numpy(target)).numpy()
