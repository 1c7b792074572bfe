"""The spectrogram-to-spectrogram conversion network.

Encoder: two strided 3x3 conv layers (batch-normalized, ReLU) that
downsample time by 4, an optional bidirectional convolutional LSTM over
frequency, then a stack of bidirectional LSTMs, each followed by a
linear projection with batchnorm and ReLU, producing the encoder
representation. Spectrogram decoder: autoregressive, one frame per
step, with a two-layer ReLU prenet on the previous frame, two
unidirectional LSTMs, content-based (optionally location-sensitive)
attention, a linear frame/stop projection, and a five-layer
convolutional postnet predicting a residual. An optional auxiliary
decoder predicts the phoneme or grapheme transcript from the same
encoder states through its own attention.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import dsp, fileio
from .errors import InvalidArgument, InvalidState

STOP_THRESHOLD = 0.5
PRENET_DROPOUT = 0.5


@dataclass(frozen=True)
class Dims:
    conv_channels: int
    clstm_channels: int
    blstm_size: int
    encoder_out: int
    prenet: int
    decoder_lstm: int
    postnet: int
    embedding: int
    aux_lstm: int
    attention: int
    location_filters: int
    location_width: int


DESK_DIMS = Dims(
    conv_channels=8, clstm_channels=8, blstm_size=32, encoder_out=64,
    prenet=32, decoder_lstm=128, postnet=32, embedding=16, aux_lstm=32,
    attention=32, location_filters=8, location_width=15,
)

PAPER_DIMS = Dims(
    conv_channels=32, clstm_channels=32, blstm_size=256, encoder_out=512,
    prenet=256, decoder_lstm=1024, postnet=512, embedding=64, aux_lstm=256,
    attention=128, location_filters=32, location_width=31,
)


@dataclass(frozen=True)
class ModelConfig:
    """One architecture row: encoder layout, attention kind, auxiliary
    decoder target, and dimension/scale presets."""

    n_clstm: int = 1
    n_blstm: int = 3
    attention_kind: str = "location"  # additive | location
    aux_target: str = "phoneme"       # none | grapheme | phoneme
    aux_loss_weight: float = 1.0
    scale: str = "desk"               # desk | paper
    n_symbols: int = 12
    decay_end_step: int = 60000
    # Output magnitudes are modeled in units of spec_scale so the
    # network's activations stay O(1); predictions are scaled back up.
    spec_scale: float = 50.0
    # Fixed affine applied to input log-mel features.
    input_shift: float = 4.0
    input_scale: float = 0.25

    def __post_init__(self):
        if self.n_clstm not in (0, 1):
            raise InvalidArgument(f"n_clstm must be 0 or 1, got {self.n_clstm}")
        if self.n_blstm not in (3, 5):
            raise InvalidArgument(f"n_blstm must be 3 or 5, got {self.n_blstm}")
        if self.attention_kind not in ("additive", "location"):
            raise InvalidArgument(f"unknown attention kind {self.attention_kind!r}")
        if self.aux_target not in ("none", "grapheme", "phoneme"):
            raise InvalidArgument(f"unknown aux target {self.aux_target!r}")

    @property
    def dims(self) -> Dims:
        return PAPER_DIMS if self.scale == "paper" else DESK_DIMS

    @property
    def features(self) -> dsp.FeatureConfig:
        return dsp.feature_preset(self.scale)

    @property
    def n_mels(self) -> int:
        return self.features.n_mels

    @property
    def target_bins(self) -> int:
        return self.features.target_bins

    @property
    def vocab_size(self) -> int:
        # symbols + EOS + PAD (PAD doubles as start-of-sequence)
        return self.n_symbols + 2

    @property
    def eos_id(self) -> int:
        return self.n_symbols

    @property
    def sos_id(self) -> int:
        return self.n_symbols + 1


# Presets named after the architecture comparison rows.
MODEL_PRESETS = {
    "base_additive": dict(aux_target="none", n_clstm=1, n_blstm=3, attention_kind="additive"),
    "grapheme_additive": dict(aux_target="grapheme", n_clstm=1, n_blstm=3, attention_kind="additive"),
    "grapheme_location": dict(aux_target="grapheme", n_clstm=1, n_blstm=3, attention_kind="location"),
    "phoneme_location": dict(aux_target="phoneme", n_clstm=1, n_blstm=3, attention_kind="location"),
    "phoneme_noclstm_3": dict(aux_target="phoneme", n_clstm=0, n_blstm=3, attention_kind="location"),
    "phoneme_noclstm_5": dict(aux_target="phoneme", n_clstm=0, n_blstm=5, attention_kind="location"),
    "phoneme_slow_decay": dict(aux_target="phoneme", n_clstm=0, n_blstm=5,
                               attention_kind="location", decay_end_step=90000),
}


def preset_config(name: str, scale: str = "desk", **overrides) -> ModelConfig:
    if name not in MODEL_PRESETS:
        raise InvalidArgument(f"unknown preset {name!r}; have {sorted(MODEL_PRESETS)}")
    return ModelConfig(scale=scale, **{**MODEL_PRESETS[name], **overrides})


@dataclass
class DecoderOutput:
    pre_spec: ad.Tensor       # [B, S, bins], magnitude units
    post_spec: ad.Tensor      # [B, S, bins]
    stop_logits: ad.Tensor    # [B, S]
    alignments: np.ndarray    # [B, S, T_enc]
    truncated: bool = False


def _ceil_div(a, b):
    return -(-a // b)


class ConversionModel:
    """Trainable conversion network assembled from a ModelConfig."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.params = ad.Registry()
        self.buffers: dict[str, np.ndarray] = {}
        rng = np.random.default_rng((seed, 0x5EED))
        d = cfg.dims
        dt = ad.default_dtype()

        # ---- encoder -----------------------------------------------------
        reg = self.params
        self.conv1_k = reg.add("encoder.conv1.kernel", ad.conv_init(rng, (3, 3, 1, d.conv_channels)))
        self._bn_params("encoder.conv1.bn", d.conv_channels, rng)
        self.conv2_k = reg.add("encoder.conv2.kernel",
                               ad.conv_init(rng, (3, 3, d.conv_channels, d.conv_channels)))
        self._bn_params("encoder.conv2.bn", d.conv_channels, rng)
        freq4 = _ceil_div(_ceil_div(cfg.n_mels, 2), 2)
        channels = d.conv_channels
        if cfg.n_clstm:
            self.clstm = ad.ConvLSTMLayer(reg, "encoder.clstm", channels, d.clstm_channels, rng)
            channels = 2 * d.clstm_channels
        else:
            self.clstm = None
        self.blstm_layers = []
        in_size = freq4 * channels
        for i in range(cfg.n_blstm):
            fwd = ad.LSTMCellLayer(reg, f"encoder.blstm{i}.fwd", in_size, d.blstm_size, rng)
            bwd = ad.LSTMCellLayer(reg, f"encoder.blstm{i}.bwd", in_size, d.blstm_size, rng)
            proj = reg.add(f"encoder.proj{i}.w",
                           ad.uniform_init(rng, (2 * d.blstm_size, d.encoder_out)))
            self._bn_params(f"encoder.proj{i}.bn", d.encoder_out, rng)
            self.blstm_layers.append((fwd, bwd, proj))
            in_size = d.encoder_out

        # ---- spectrogram decoder ----------------------------------------
        bins = cfg.target_bins
        self.prenet_w1 = reg.add("spec_decoder.prenet.w1", ad.uniform_init(rng, (bins, d.prenet)))
        self.prenet_b1 = reg.add("spec_decoder.prenet.b1", np.zeros(d.prenet, dt))
        self.prenet_w2 = reg.add("spec_decoder.prenet.w2", ad.uniform_init(rng, (d.prenet, d.prenet)))
        self.prenet_b2 = reg.add("spec_decoder.prenet.b2", np.zeros(d.prenet, dt))
        self.spec_attention = self._make_attention("spec_decoder.attention",
                                                   d.decoder_lstm, rng)
        self.dec_lstm1 = ad.LSTMCellLayer(reg, "spec_decoder.lstm1",
                                          d.prenet + d.encoder_out, d.decoder_lstm, rng)
        self.dec_lstm2 = ad.LSTMCellLayer(reg, "spec_decoder.lstm2",
                                          d.decoder_lstm + d.encoder_out, d.decoder_lstm, rng)
        out_in = d.decoder_lstm + d.encoder_out
        self.frame_w = reg.add("spec_decoder.frame.w", ad.uniform_init(rng, (out_in, bins)))
        self.frame_b = reg.add("spec_decoder.frame.b", np.zeros(bins, dt))
        self.stop_w = reg.add("spec_decoder.stop.w", ad.uniform_init(rng, (out_in, 1)))
        self.stop_b = reg.add("spec_decoder.stop.b", np.zeros(1, dt))
        self.postnet = []
        for k in range(5):
            cin = bins if k == 0 else d.postnet
            cout = bins if k == 4 else d.postnet
            kern = reg.add(f"spec_decoder.postnet.conv{k}.kernel",
                           ad.conv_init(rng, (5, cin, cout)))
            self._bn_params(f"spec_decoder.postnet.conv{k}.bn", cout, rng)
            self.postnet.append(kern)

        # ---- auxiliary transcript decoder ---------------------------------
        if cfg.aux_target != "none":
            self.aux_embedding = reg.add("aux_decoder.embedding",
                                         ad.uniform_init(rng, (cfg.vocab_size, d.embedding)))
            self.aux_attention = self._make_attention("aux_decoder.attention", d.aux_lstm, rng)
            self.aux_lstm = ad.LSTMCellLayer(reg, "aux_decoder.lstm",
                                             d.embedding + d.encoder_out, d.aux_lstm, rng)
            self.aux_out_w = reg.add("aux_decoder.out.w",
                                     ad.uniform_init(rng, (d.encoder_out + d.aux_lstm,
                                                           cfg.vocab_size)))
            self.aux_out_b = reg.add("aux_decoder.out.b", np.zeros(cfg.vocab_size, dt))

        self._fb = None

    # ---- construction helpers ---------------------------------------------

    def _bn_params(self, name, channels, rng):
        dt = ad.default_dtype()
        self.params.add(f"{name}.gamma", np.ones(channels, dt))
        self.params.add(f"{name}.beta", np.zeros(channels, dt))
        self.buffers[f"{name}.running_mean"] = np.zeros(channels, np.float64)
        self.buffers[f"{name}.running_var"] = np.ones(channels, np.float64)

    def _make_attention(self, name, query_size, rng):
        d = self.cfg.dims
        if self.cfg.attention_kind == "location":
            return ad.LocationSensitiveAttention(
                self.params, name, query_size, d.encoder_out, d.attention, rng,
                n_filters=d.location_filters, filter_width=d.location_width)
        return ad.AdditiveAttention(self.params, name, query_size, d.encoder_out,
                                    d.attention, rng)

    def _bn(self, name, x, training, mask=None):
        return ad.batch_norm(
            x, self.params[f"{name}.gamma"], self.params[f"{name}.beta"],
            self.buffers[f"{name}.running_mean"], self.buffers[f"{name}.running_var"],
            training, mask=mask)

    def census(self) -> dict[str, int]:
        """Trainable parameter counts per component prefix."""
        return self.params.census()

    # ---- encoder ------------------------------------------------------------

    def encode_batch(self, features: ad.Tensor, lengths, training: bool):
        """features [B, T, n_mels] padded; returns (states [B, T4, H],
        enc_lengths, enc_mask [B, T4])."""
        if features.shape[1] < 4:
            raise InvalidArgument("encoder needs at least 4 input frames")
        cfg = self.cfg
        lengths = np.asarray(lengths)
        b, t, m = features.shape
        x = ad.mul(ad.add(features, cfg.input_shift), cfg.input_scale)
        x = ad.reshape(x, (b, t, m, 1))
        len2 = _ceil_div(lengths, 2)
        len4 = _ceil_div(len2, 2)
        t2, t4 = _ceil_div(t, 2), _ceil_div(_ceil_div(t, 2), 2)
        mask2 = _time_mask(len2, t2)[:, :, None, None]
        mask4 = _time_mask(len4, t4)[:, :, None, None]
        x = ad.conv2d(x, self.conv1_k, stride=(2, 2))
        x = ad.relu(self._bn("encoder.conv1.bn", x, training, mask=mask2))
        x = ad.conv2d(x, self.conv2_k, stride=(2, 2))
        x = ad.relu(self._bn("encoder.conv2.bn", x, training, mask=mask4))
        if self.clstm is not None:
            x = self.clstm(x, lengths=len4)
            x = ad.mul(x, ad.Tensor(mask4.astype(x.data.dtype)))
        bsz, t4_, f4, ch = x.shape
        x = ad.reshape(x, (bsz, t4_, f4 * ch))
        mask_t = _time_mask(len4, t4_)
        for i, (fwd, bwd, proj) in enumerate(self.blstm_layers):
            x = ad.bidirectional_rnn(fwd, bwd, x, lengths=len4)
            x = ad.matmul(x, proj)
            x = ad.relu(self._bn(f"encoder.proj{i}.bn", x, training, mask=mask_t[:, :, None]))
        return x, len4, mask_t

    def encode(self, features, training: bool = False):
        """Single utterance [T, n_mels] -> encoder states [T4, H]."""
        feats = np.asarray(features, ad.default_dtype())
        states, _, _ = self.encode_batch(ad.Tensor(feats[None]), [feats.shape[0]], training)
        return ad.reshape(states, states.shape[1:])

    # ---- spectrogram decoder -------------------------------------------------

    def decode_spectrogram(self, states, enc_mask=None, teacher=None, rng=None,
                           training=False, max_steps=None,
                           target_lengths=None) -> DecoderOutput:
        """Teacher-forced when teacher frames are given (training), else
        autoregressive with stop-token termination."""
        single = states.ndim == 2
        if single:
            states = ad.reshape(states, (1,) + states.shape)
        cfg = self.cfg
        b, t_enc, _ = states.shape
        if enc_mask is None:
            enc_mask = np.ones((b, t_enc), np.float64)
        if rng is None:
            rng = np.random.default_rng(0)
        inv_scale = 1.0 / cfg.spec_scale
        dtype = states.data.dtype
        teach_np = None
        if teacher is not None:
            teach_np = teacher.data if isinstance(teacher, ad.Tensor) else np.asarray(teacher, dtype)
            if teach_np.ndim == 2:
                teach_np = teach_np[None]
            n_steps = teach_np.shape[1]
        else:
            n_steps = max_steps if max_steps is not None else 4 * t_enc + 40

        processed = self.spec_attention.process_keys(states)
        h1, c1 = self.dec_lstm1.zero_state(b, dtype)
        h2, c2 = self.dec_lstm2.zero_state(b, dtype)
        prev_frame = np.zeros((b, cfg.target_bins), dtype)
        prev_weights = ad.Tensor(_initial_alignment(b, t_enc, dtype))
        context = ad.Tensor(np.zeros((b, cfg.dims.encoder_out), dtype))
        frames, stops, aligns = [], [], []
        truncated = teacher is None
        for step in range(n_steps):
            pre = ad.relu(ad.linear(ad.Tensor(prev_frame * inv_scale),
                                    self.prenet_w1, self.prenet_b1))
            pre = ad.dropout(pre, PRENET_DROPOUT, rng)
            pre = ad.relu(ad.linear(pre, self.prenet_w2, self.prenet_b2))
            pre = ad.dropout(pre, PRENET_DROPOUT, rng)
            x = ad.concat([pre, context], axis=1)
            h1, (_, c1) = self.dec_lstm1(x, (h1, c1))
            context, weights = self.spec_attention(
                h1, states, states, processed_keys=processed, mask=enc_mask,
                prev_weights=prev_weights if cfg.attention_kind == "location" else None)
            h2, (_, c2) = self.dec_lstm2(ad.concat([h1, context], axis=1), (h2, c2))
            out_in = ad.concat([h2, context], axis=1)
            frame = ad.linear(out_in, self.frame_w, self.frame_b)
            stop_logit = ad.linear(out_in, self.stop_w, self.stop_b)
            frames.append(frame)
            stops.append(stop_logit)
            aligns.append(weights.data.copy())
            prev_weights = weights
            if teach_np is not None:
                prev_frame = np.ascontiguousarray(teach_np[:, step])
            else:
                prev_frame = frame.data * cfg.spec_scale
                if b == 1 and _sigmoid_scalar(stop_logit.data[0, 0]) > STOP_THRESHOLD:
                    truncated = False
                    break

        pre_scaled = ad.stack_time(frames)
        stop_logits = ad.reshape(ad.stack_time(stops), (b, len(frames)))
        post_mask = None
        if target_lengths is not None:
            post_mask = _time_mask(target_lengths, len(frames))[:, :, None]
        res = self._postnet(pre_scaled, training, mask=post_mask)
        post_scaled = ad.add(pre_scaled, res)
        pre_spec = ad.mul(pre_scaled, cfg.spec_scale)
        post_spec = ad.mul(post_scaled, cfg.spec_scale)
        alignments = np.stack(aligns, axis=1)
        if single:
            pre_spec = ad.reshape(pre_spec, pre_spec.shape[1:])
            post_spec = ad.reshape(post_spec, post_spec.shape[1:])
            stop_logits = ad.reshape(stop_logits, stop_logits.shape[1:])
            alignments = alignments[0]
        return DecoderOutput(pre_spec, post_spec, stop_logits, alignments, truncated)

    def _postnet(self, x, training, mask=None):
        d = self.cfg.dims
        for k, kern in enumerate(self.postnet):
            x = ad.conv1d(x, kern, stride=1, padding="same")
            x = self._bn(f"spec_decoder.postnet.conv{k}.bn", x, training, mask=mask)
            if k < 4:
                x = ad.tanh(x)
        return x

    # ---- auxiliary decoder -----------------------------------------------------

    def decode_aux(self, states, enc_mask=None, teacher_ids=None, training=False,
                   max_steps=50):
        """Transcript logits [B, L+1, vocab] under teacher forcing, or a
        greedy-decoded id list for a single utterance."""
        if self.cfg.aux_target == "none":
            raise InvalidState("model was built without an auxiliary decoder")
        single = states.ndim == 2
        if single:
            states = ad.reshape(states, (1,) + states.shape)
        b, t_enc, _ = states.shape
        if enc_mask is None:
            enc_mask = np.ones((b, t_enc), np.float64)
        dtype = states.data.dtype
        processed = self.aux_attention.process_keys(states)
        h, c = self.aux_lstm.zero_state(b, dtype)
        prev_weights = ad.Tensor(_initial_alignment(b, t_enc, dtype))
        location = self.cfg.attention_kind == "location"

        context = ad.Tensor(np.zeros((b, self.cfg.dims.encoder_out), dtype))

        if teacher_ids is not None:
            teacher_ids = np.asarray(teacher_ids)
            n_steps = teacher_ids.shape[1] + 1
            inputs = np.concatenate(
                [np.full((b, 1), self.cfg.sos_id), teacher_ids], axis=1)
            logits = []
            for step in range(n_steps):
                emb = ad.embedding_lookup(self.aux_embedding, inputs[:, step])
                h, (_, c) = self.aux_lstm(ad.concat([emb, context], axis=1), (h, c))
                context, weights = self.aux_attention(
                    h, states, states, processed_keys=processed, mask=enc_mask,
                    prev_weights=prev_weights if location else None)
                logits.append(ad.linear(ad.concat([context, h], axis=1),
                                        self.aux_out_w, self.aux_out_b))
                prev_weights = weights
            out = ad.stack_time(logits)
            return ad.reshape(out, out.shape[1:]) if single else out

        # greedy decoding, diagnostics only
        if b != 1:
            raise InvalidArgument("greedy aux decoding is single-utterance")
        symbol = self.cfg.sos_id
        decoded = []
        with ad.no_grad():
            for _ in range(max_steps):
                emb = ad.embedding_lookup(self.aux_embedding, np.array([symbol]))
                h, (_, c) = self.aux_lstm(ad.concat([emb, context], axis=1), (h, c))
                context, weights = self.aux_attention(
                    h, states, states, processed_keys=processed, mask=enc_mask,
                    prev_weights=prev_weights if location else None)
                logits = ad.linear(ad.concat([context, h], axis=1),
                                   self.aux_out_w, self.aux_out_b)
                symbol = int(np.argmax(logits.data[0]))
                prev_weights = weights
                if symbol == self.cfg.eos_id:
                    break
                decoded.append(symbol)
        return decoded

    # ---- end-to-end conversion ---------------------------------------------

    def filterbank(self) -> dsp.MelFilterbank:
        if self._fb is None:
            feat = self.cfg.features
            self._fb = dsp.mel_filterbank(feat.n_mels, feat.fmin_hz, feat.fmax_hz,
                                          feat.fft_size_in, feat.sample_rate_hz)
        return self._fb

    def convert(self, audio: dsp.AudioBuffer, vocoder_iters: int = 60, seed: int = 0):
        """audio -> log-mel -> encode -> autoregressive decode -> phase
        reconstruction -> audio. Returns (AudioBuffer, info dict)."""
        feat = self.cfg.features
        mel = dsp.log_mel(audio, feat.stft_in, self.filterbank())
        rng = np.random.default_rng((seed, 0xD0))
        with ad.no_grad():
            states, lens, mask = self.encode_batch(
                ad.Tensor(mel.features.astype(ad.default_dtype())[None]),
                [mel.n_frames], training=False)
            out = self.decode_spectrogram(states, enc_mask=mask, rng=rng, training=False)
        mags = np.maximum(out.post_spec.data[0].astype(np.float64), 0.0)
        spec = dsp.LinearSpectrogram(mags, feat.stft_out)
        wave, distances = dsp.griffin_lim(spec, n_iters=vocoder_iters,
                                          sample_rate_hz=feat.sample_rate_hz)
        samples = wave.samples
        peak = np.max(np.abs(samples))
        if peak > 0.9:
            samples = samples * (0.9 / peak)
        info = {
            "n_frames": out.post_spec.data.shape[1],
            "truncated": out.truncated,
            "gl_distances": distances,
            "alignments": out.alignments,
        }
        return dsp.AudioBuffer(samples, feat.sample_rate_hz), info

    # ---- persistence ----------------------------------------------------------

    def save_checkpoint(self, path, extra: dict | None = None) -> None:
        entries = {"__config__": np.frombuffer(
            json.dumps(asdict(self.cfg), sort_keys=True).encode(), dtype=np.uint8).copy()}
        for name, p in self.params.items():
            entries[f"param.{name}"] = p.data
        for name, buf in self.buffers.items():
            entries[f"buffer.{name}"] = buf
        if extra:
            entries.update(extra)
        fileio.write_container(path, entries)

    @classmethod
    def load_checkpoint(cls, path):
        """Returns (model, extra_entries)."""
        entries = fileio.read_container(path)
        cfg = ModelConfig(**json.loads(bytes(entries.pop("__config__")).decode()))
        model = cls(cfg, seed=0)
        extra = {}
        for name, value in entries.items():
            if name.startswith("param."):
                pname = name[len("param."):]
                model.params[pname].data = value.astype(model.params[pname].data.dtype)
            elif name.startswith("buffer."):
                model.buffers[name[len("buffer."):]][...] = value
            else:
                extra[name] = value
        return model, extra


def _time_mask(lengths, t):
    pos = np.arange(t)[None, :]
    return (pos < np.asarray(lengths)[:, None]).astype(np.float64)


def _initial_alignment(b, t_enc, dtype):
    w = np.zeros((b, t_enc), dtype)
    w[:, 0] = 1.0
    return w


def _sigmoid_scalar(z):
    return 1.0 / (1.0 + np.exp(-z)) if z >= 0 else np.exp(z) / (1.0 + np.exp(z))
