"""RNN-T recognizer: feature wrapper, encoder, prediction and joint networks, decoding."""

from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import MfccConfig, RnntConfig
from .dsp import SignalLike, as_tensor, compute_mfcc
from .errors import DecodeError, LatticeError, ShapeMismatchError
from .models import BLANK_SYMBOL, FeatureSequence, TokenSequence, UncertaintyFeatures
from .nn import BiLstm, init_parameters
from .rnnt_loss import BLANK, rnnt_loss

DecodeMode = Literal["greedy", "beam"]

LstmState = Tuple[torch.Tensor, torch.Tensor]


class Vocabulary:
    """Closed character vocabulary; id 0 is the blank symbol."""

    def __init__(self, symbols: Union[str, Sequence[str]]):
        self.symbols = [BLANK_SYMBOL] + list(symbols)
        self._index: Dict[str, int] = {s: i for i, s in enumerate(self.symbols)}

    def __len__(self) -> int:
        return len(self.symbols)

    def encode(self, tokens: TokenSequence) -> List[int]:
        try:
            return [self._index[token] for token in tokens.tokens]
        except KeyError as e:
            raise LatticeError(f"token {e} is not in the vocabulary", code="unknown_token") from e

    def decode(self, ids: Sequence[int]) -> TokenSequence:
        return TokenSequence(tokens=[self.symbols[i] for i in ids if i != BLANK])


class FeatureWrapper(nn.Module):
    """Strided conv over MFCC frames, optionally followed by uncertainty columns."""

    def __init__(self, config: RnntConfig, features: MfccConfig):
        super().__init__()
        self.config = config
        self.features = features
        self.conv = nn.Conv1d(
            features.mfcc_dim,
            config.wrapper_channels,
            config.wrapper_kernel,
            stride=config.wrapper_stride,
        )

    def forward(self, mfcc: torch.Tensor, extra: Optional[torch.Tensor] = None) -> torch.Tensor:
        """(T, D) MFCC and optional (T', E) extras -> (T', C [+ E])."""
        if mfcc.shape[0] < self.config.wrapper_kernel:
            raise ShapeMismatchError(
                "feature wrapper", f"at least {self.config.wrapper_kernel} frames", mfcc.shape
            )
        out = self.conv(mfcc.t().unsqueeze(0)).squeeze(0).t()
        if extra is None:
            return out
        if extra.dim() != 2 or extra.shape[0] != out.shape[0]:
            raise ShapeMismatchError(
                "feature wrapper uncertainty frames", f"({out.shape[0]}, E)", extra.shape
            )
        return torch.cat([out, extra.to(out.dtype)], dim=-1)


class RnntModel(nn.Module):
    """Feature wrapper, bidirectional encoder, LSTM prediction network and joint network."""

    def __init__(
        self,
        config: RnntConfig,
        features: MfccConfig,
        vocabulary: Vocabulary,
        extra_dim: int = 0,
        seed: Optional[int] = None,
    ):
        super().__init__()
        self.config = config
        self.vocabulary = vocabulary
        vocab_size = len(vocabulary)
        self.extra_dim = extra_dim
        self.wrapper = FeatureWrapper(config, features)
        self.encoder = BiLstm(
            config.wrapper_channels + extra_dim,
            config.hidden_size,
            config.encoder_layers,
            config.dropout,
        )
        self.embedding = nn.Embedding(vocab_size, config.embed_dim)
        self.predictor = nn.LSTM(
            config.embed_dim,
            config.hidden_size,
            num_layers=config.decoder_layers,
            dropout=config.dropout if config.decoder_layers > 1 else 0.0,
            batch_first=True,
        )
        self.joint_encoder = nn.Linear(2 * config.hidden_size, config.joint_dim)
        self.joint_predictor = nn.Linear(config.hidden_size, config.joint_dim)
        self.joint_output = nn.Linear(config.joint_dim, vocab_size)
        init_parameters(self, seed)

    @property
    def input_dim(self) -> int:
        return self.config.wrapper_channels + self.extra_dim

    @property
    def dtype(self) -> torch.dtype:
        return self.joint_output.weight.dtype

    def encode(self, features: torch.Tensor) -> torch.Tensor:
        if features.dim() != 2 or features.shape[-1] != self.input_dim:
            raise ShapeMismatchError("rnnt encoder", f"(T', {self.input_dim})", features.shape)
        return self.encoder(features.to(self.dtype))

    def predict(self, labels: Sequence[int]) -> torch.Tensor:
        """(U+1, H) prediction network outputs; blank is the start symbol."""
        ids = torch.tensor([BLANK] + list(labels), dtype=torch.long)
        out, _ = self.predictor(self.embedding(ids).unsqueeze(0))
        return out.squeeze(0)

    def predict_step(
        self, label: int, state: Optional[LstmState]
    ) -> Tuple[torch.Tensor, LstmState]:
        ids = torch.tensor([[label]], dtype=torch.long)
        out, new_state = self.predictor(self.embedding(ids), state)
        return out[0, 0], new_state

    def joint(self, encoded: torch.Tensor, predicted: torch.Tensor) -> torch.Tensor:
        """(T', 2H) x (U+1, H) -> (T', U+1, K) log-probabilities."""
        hidden = torch.tanh(
            self.joint_encoder(encoded).unsqueeze(1) + self.joint_predictor(predicted).unsqueeze(0)
        )
        return F.log_softmax(self.joint_output(hidden), dim=-1)

    def lattice(self, features: torch.Tensor, labels: Sequence[int]) -> torch.Tensor:
        return self.joint(self.encode(features), self.predict(labels))

    def loss(self, features: torch.Tensor, labels: Sequence[int]) -> torch.Tensor:
        """Transducer loss of one utterance from wrapper output features."""
        return rnnt_loss(self.lattice(features, labels), labels)

    def expand_input(self, extra_dim: int) -> "RnntModel":
        """Widen the encoder input by zero-initialised columns.

        The widened model computes exactly the same function as long as the
        new columns are fed; later fine-tuning learns their weights.
        """
        if extra_dim < self.extra_dim:
            raise ShapeMismatchError("expand_input", f">= {self.extra_dim}", [extra_dim])
        if extra_dim == self.extra_dim:
            return self
        old = self.encoder.lstm
        new = BiLstm(
            self.config.wrapper_channels + extra_dim,
            self.config.hidden_size,
            self.config.encoder_layers,
            self.config.dropout,
        ).to(self.dtype)
        with torch.no_grad():
            for name, value in old.named_parameters():
                target = getattr(new.lstm, name)
                if name.startswith("weight_ih_l0"):
                    target.zero_()
                    target[:, : value.shape[1]] = value
                else:
                    target.copy_(value)
        self.encoder = new
        self.extra_dim = extra_dim
        return self


def wrapper_features(
    samples: torch.Tensor,
    model: RnntModel,
    extra: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Differentiable waveform -> MFCC -> wrapper features (T', C [+ E])."""
    mfcc = compute_mfcc(samples, model.wrapper.features).to(model.dtype)
    return model.wrapper(mfcc, extra)


def fe_wrapper(
    s_target: SignalLike,
    extra_features: Optional[UncertaintyFeatures],
    model: RnntModel,
) -> FeatureSequence:
    """Recognizer input features of a waveform, with optional uncertainty columns.

    Raises:
        ShapeMismatchError: If the uncertainty frames do not match the wrapper output
    """
    extra = extra_features.as_matrix() if extra_features is not None else None
    frames = wrapper_features(as_tensor(s_target), model, extra)
    features = model.wrapper.features
    return FeatureSequence(
        frames=frames,
        frame_shift_s=features.shift_s * model.config.wrapper_stride,
        frame_length_s=features.window_length_s
        + features.shift_s * (model.config.wrapper_kernel - 1),
    )


def _frames(features: Union[FeatureSequence, torch.Tensor]) -> torch.Tensor:
    return features.frames if isinstance(features, FeatureSequence) else features


def _greedy(model: RnntModel, encoded: torch.Tensor, max_symbols: int) -> List[int]:
    hyp: List[int] = []
    predicted, state = model.predict_step(BLANK, None)
    for t in range(encoded.shape[0]):
        for _ in range(max_symbols):
            log_probs = model.joint(encoded[t : t + 1], predicted.unsqueeze(0))[0, 0]
            symbol = int(torch.argmax(log_probs))
            if symbol == BLANK:
                break
            hyp.append(symbol)
            predicted, state = model.predict_step(symbol, state)
    return hyp


class _Hyp:
    __slots__ = ("tokens", "score", "predicted", "state")

    def __init__(
        self,
        tokens: Tuple[int, ...],
        score: float,
        predicted: torch.Tensor,
        state: Optional[LstmState],
    ):
        self.tokens = tokens
        self.score = score
        self.predicted = predicted
        self.state = state


def _beam(
    model: RnntModel, encoded: torch.Tensor, beam_size: int, max_symbols: int
) -> List[int]:
    predicted, state = model.predict_step(BLANK, None)
    hyps = [_Hyp((), 0.0, predicted, state)]
    for t in range(encoded.shape[0]):
        frame = encoded[t : t + 1]
        closed: List[_Hyp] = []
        active = hyps
        for step in range(max_symbols + 1):
            if not active:
                break
            # (score, is_closed, hyp, symbol); closed hyps from earlier steps compete too.
            pool: List[Tuple[float, bool, _Hyp, int]] = [(h.score, True, h, BLANK) for h in closed]
            for hyp in active:
                log_probs = model.joint(frame, hyp.predicted.unsqueeze(0))[0, 0].double()
                scores = (hyp.score + log_probs).tolist()
                pool.append((scores[BLANK], True, hyp, BLANK))
                if step < max_symbols:
                    pool.extend((scores[k], False, hyp, k) for k in range(1, len(scores)))
            order = sorted(range(len(pool)), key=lambda i: -pool[i][0])
            chosen = [pool[i] for i in order[:beam_size]]
            closed, active = [], []
            for score, is_closed, hyp, symbol in chosen:
                if is_closed:
                    closed.append(_Hyp(hyp.tokens, score, hyp.predicted, hyp.state))
                else:
                    predicted, state = model.predict_step(symbol, hyp.state)
                    active.append(_Hyp(hyp.tokens + (symbol,), score, predicted, state))
        merged: Dict[Tuple[int, ...], _Hyp] = {}
        for hyp in closed:
            if hyp.tokens in merged:
                kept = merged[hyp.tokens]
                kept.score = float(np.logaddexp(kept.score, hyp.score))
            else:
                merged[hyp.tokens] = hyp
        hyps = sorted(merged.values(), key=lambda h: -h.score)[:beam_size]
    return list(max(hyps, key=lambda h: h.score).tokens)


def recognize(
    features: Union[FeatureSequence, torch.Tensor],
    model: RnntModel,
    mode: DecodeMode = "greedy",
    beam_size: Optional[int] = None,
) -> TokenSequence:
    """Decode wrapper features into a transcript.

    Greedy decoding emits argmax symbols on a frame until blank (at most
    ``max_symbols_per_step``), then advances. Beam decoding keeps the
    ``beam_size`` best partial hypotheses per expansion step, pooling closed
    and open hypotheses, and merges identical label sequences at each frame;
    with ``beam_size=1`` it reproduces greedy decoding.

    Raises:
        DecodeError: On empty features or an unknown mode
    """
    frames = _frames(features)
    if frames.dim() != 2 or frames.shape[0] == 0:
        raise DecodeError(f"cannot decode features of shape {tuple(frames.shape)}")
    beam_size = beam_size or model.config.beam_size
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            encoded = model.encode(frames)
            max_symbols = model.config.max_symbols_per_step
            if mode == "greedy":
                ids = _greedy(model, encoded, max_symbols)
            elif mode == "beam":
                ids = _beam(model, encoded, beam_size, max_symbols)
            else:
                raise DecodeError(f"unknown decoding mode {mode!r}")
    finally:
        model.train(was_training)
    return model.vocabulary.decode(ids)
