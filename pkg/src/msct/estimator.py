"""scikit-learn style wrapper around the two-branch model."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .autograd import no_grad
from .data import CATEGORY_LABELS, SampleRecord, split_modalities
from .model import ModelConfig, forward
from .objectives import LossWeights, real_probability
from .training import DataConfig, OptimConfig, RunConfig, train

_TRIPLE_TO_CATEGORY = {v: k for k, v in CATEGORY_LABELS.items()}


class MSCTClassifier(ClassifierMixin, BaseEstimator):
    """Real/fake classifier over frame-aligned audio-visual features.

    ``X`` has shape ``(n_samples, T, n_audio_channels + n_visual_channels)``:
    per frame, the audio features followed by the visual features.

    ``y`` is either a 1-D array of multi-modal labels (1 = real) or an
    ``(n_samples, 3)`` array of ``(y_audio, y_visual, y_multi)`` triples.
    With 1-D labels the per-modality heads get no supervision (their
    cross-entropy weights are set to zero).
    """

    def __init__(self, n_audio_channels=12, dim=16, n_blocks=2, n_heads=4,
                 self_attention="mssa", cross_attention="dca", ffn_multiplier=4,
                 alignment_weight=1.0, lr=1e-3, batch_size=8, epochs=200,
                 max_steps=300, init_std=0.02, random_state=0):
        self.n_audio_channels = n_audio_channels
        self.dim = dim
        self.n_blocks = n_blocks
        self.n_heads = n_heads
        self.self_attention = self_attention
        self.cross_attention = cross_attention
        self.ffn_multiplier = ffn_multiplier
        self.alignment_weight = alignment_weight
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.max_steps = max_steps
        self.init_std = init_std
        self.random_state = random_state

    def _check_X(self, X, reset: bool) -> np.ndarray:
        X = check_array(X, allow_nd=True, dtype=np.float64, ensure_all_finite=True)
        if X.ndim != 3:
            raise ValueError(f"X must be 3-D (n_samples, T, channels), got shape {X.shape}")
        n_features = X.shape[1] * X.shape[2]
        if reset:
            if not 0 < self.n_audio_channels < X.shape[2]:
                raise ValueError(f"n_audio_channels={self.n_audio_channels} leaves no room for "
                                 f"visual channels in {X.shape[2]} columns")
            self.n_features_in_ = n_features
            self.input_shape_ = X.shape[1:]
        elif X.shape[1:] != self.input_shape_:
            raise ValueError(f"X has per-sample shape {X.shape[1:]}, expected {self.input_shape_}")
        return X

    def _records(self, X, y) -> tuple[list[SampleRecord], bool]:
        y = np.asarray(y)
        if y.ndim == 2 and y.shape[1] == 3:
            triples = [tuple(int(v) for v in row) for row in y]
            bad = [t for t in triples if t not in _TRIPLE_TO_CATEGORY]
            if bad:
                raise ValueError(f"label triple {bad[0]} is not a valid (y_a, y_v, y_m) combination")
            cats = [_TRIPLE_TO_CATEGORY[t] for t in triples]
            full = True
        elif y.ndim == 1:
            if not np.all(np.isin(y, (0, 1))):
                raise ValueError(f"labels must be 0 (fake) or 1 (real), got {np.unique(y).tolist()}")
            # modality heads are switched off, so the proxy category only sets y_m
            cats = ["RARV" if v == 1 else "FAFV" for v in y]
            full = False
        else:
            raise ValueError(f"y must be 1-D or (n_samples, 3), got shape {y.shape}")
        if len(cats) != len(X):
            raise ValueError(f"X has {len(X)} samples but y has {len(cats)}")
        audio, visual = split_modalities(X, self.n_audio_channels)
        records = [SampleRecord(f"x{i}", c, audio[i].T, visual[i]) for i, c in enumerate(cats)]
        return records, full

    def fit(self, X, y):
        X = self._check_X(X, reset=True)
        records, full = self._records(X, y)
        y_m = np.array([r.labels[2] for r in records])
        if len(np.unique(y_m)) < 2:
            raise ValueError("training data must contain both real and fake samples")
        model = ModelConfig(
            C=self.dim, n_blocks=self.n_blocks, h=self.n_heads, T=X.shape[1],
            C_a=self.n_audio_channels, C_v_feat=X.shape[2] - self.n_audio_channels,
            self_attention=self.self_attention, cross_attention=self.cross_attention,
            ffn_multiplier=self.ffn_multiplier, init_std=self.init_std)
        weights = LossWeights(ce_audio=1.0 if full else 0.0, ce_visual=1.0 if full else 0.0,
                              alignment=self.alignment_weight)
        cfg = RunConfig(model=model, loss=weights, optim=OptimConfig(lr=self.lr, batch_size=self.batch_size),
                        data=DataConfig(), epochs=self.epochs, max_steps=self.max_steps,
                        seed=self.random_state)
        result = train(cfg, records)
        self.config_ = cfg
        self.params_ = result.params
        self.history_ = result.history
        self.n_steps_ = result.steps
        self.classes_ = np.array([0, 1])
        return self

    def _forward(self, X):
        check_is_fitted(self, "params_")
        X = self._check_X(X, reset=False)
        audio, visual = split_modalities(X, self.n_audio_channels)
        with no_grad():
            return forward(self.params_, self.config_.model, audio, visual)

    def decision_function(self, X) -> np.ndarray:
        """Logit margin of the multi-modal head (positive means real)."""
        logits = self._forward(X).logits_m.data
        return logits[:, 1] - logits[:, 0]

    def predict_proba(self, X) -> np.ndarray:
        p_real = real_probability(self._forward(X).logits_m)
        return np.column_stack([1.0 - p_real, p_real])

    def predict(self, X) -> np.ndarray:
        # ties go to "fake", matching predict_labels
        return (self.decision_function(X) > 0).astype(int)

    def transform(self, X) -> np.ndarray:
        """Concatenated CLS embeddings, shape (n_samples, 2 * dim)."""
        return self._forward(X).embeddings()
