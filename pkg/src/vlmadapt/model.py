"""Miniature visually-conditioned autoregressive LM.

Architecture: a frozen linear patch encoder (identical weights in every model,
seeded from a fixed constant), a perceiver-style resampler emitting a fixed
number of visual tokens, and a stack of decoder blocks. Each block runs a
tanh-gated cross-attention + gated feed-forward pair (gates start at zero, so
a fresh model is purely text-conditioned), then causal self-attention and a
feed-forward sublayer. Optional bottleneck adapters sit after the
cross-attention, self-attention, and feed-forward sublayers (three per block).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import tensor as T
from . import vocab
from .checkpoint import load_into_store, save_checkpoint
from .params import ParameterStore
from .rng import Rng, derive_seed

# One frozen encoder for the whole repo: the stand-in for a shared pre-trained
# vision backbone. Never depends on the experiment seed.
ENCODER_SEED = derive_seed(0xF0553D, "frozen-vision-encoder")

NEG_MASK = -1e30


@dataclass
class VLMConfig:
    vocab_size: int = vocab.VOCAB_SIZE
    d_model: int = 64
    n_heads: int = 2
    n_decoder_blocks: int = 4
    n_latents: int = 8
    n_resampler_blocks: int = 1
    patch_grid: tuple[int, int] = (2, 2)
    patch_px: int = 4
    channels: int = 3
    adapter_bottleneck: int = 16
    max_seq_len: int = 96
    ff_mult: int = 2
    patch_pos_emb: bool = False

    def __post_init__(self):
        self.patch_grid = tuple(self.patch_grid)
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.adapter_bottleneck >= self.d_model:
            raise ValueError("adapter_bottleneck must be smaller than d_model")

    @property
    def n_patches(self) -> int:
        return self.patch_grid[0] * self.patch_grid[1]

    @property
    def image_hw(self) -> tuple[int, int]:
        return (self.patch_grid[0] * self.patch_px, self.patch_grid[1] * self.patch_px)

    def to_json(self) -> dict:
        d = asdict(self)
        d["patch_grid"] = list(self.patch_grid)
        return d

    @staticmethod
    def from_json(d: dict) -> "VLMConfig":
        d = dict(d)
        d["patch_grid"] = tuple(d["patch_grid"])
        return VLMConfig(**d)


class VLM:
    def __init__(self, config: VLMConfig, seed: int = 0):
        self.cfg = config
        self.store = ParameterStore()
        self.adapters_inserted = False
        self._build(seed)

    # ------------------------------------------------------------------
    # Parameter construction

    def _add_linear(self, rng: Rng, name: str, fan_in: int, fan_out: int, group: str) -> None:
        self.store.add(f"{name}.w", rng.normals((fan_in, fan_out), 1.0 / math.sqrt(fan_in)), group)
        self.store.add(f"{name}.b", np.zeros(fan_out), group)

    def _add_ln(self, name: str, group: str) -> None:
        d = self.cfg.d_model
        self.store.add(f"{name}.g", np.ones(d), group)
        self.store.add(f"{name}.b", np.zeros(d), group)

    def _add_attn(self, rng: Rng, name: str, group: str) -> None:
        d = self.cfg.d_model
        for proj in ("q", "k", "v", "o"):
            self._add_linear(rng, f"{name}.{proj}", d, d, group)

    def _add_ff(self, rng: Rng, name: str, group: str) -> None:
        d, h = self.cfg.d_model, self.cfg.d_model * self.cfg.ff_mult
        self._add_linear(rng, f"{name}.w1", d, h, group)
        self._add_linear(rng, f"{name}.w2", h, d, group)

    def _build(self, seed: int) -> None:
        cfg = self.cfg
        d = cfg.d_model

        enc_rng = Rng(derive_seed(ENCODER_SEED, "weights"))
        patch_dim = cfg.channels * cfg.patch_px * cfg.patch_px
        self.store.add("venc.proj.w", enc_rng.normals((patch_dim, d), 1.0 / math.sqrt(patch_dim)),
                       "vision_encoder")
        self.store.add("venc.proj.b", enc_rng.normals((d,), 0.1), "vision_encoder")
        self.store.add("venc.ln.g", np.ones(d), "vision_encoder")
        self.store.add("venc.ln.b", np.zeros(d), "vision_encoder")
        # vision encoder is permanently frozen; nothing upstream of it needs grads
        for name in ("venc.proj.w", "venc.proj.b", "venc.ln.g", "venc.ln.b"):
            self.store[name].requires_grad = False

        rng = Rng(derive_seed(seed, "model-init"))
        self.store.add("res.latents", rng.normals((cfg.n_latents, d), 1.0), "resampler")
        if cfg.patch_pos_emb:
            self.store.add("res.patch_pos", rng.normals((cfg.n_patches, d), 0.5), "resampler")
        for i in range(cfg.n_resampler_blocks):
            self._add_attn(rng, f"res{i}.attn", "resampler")
            self._add_ln(f"res{i}.ln_q", "resampler")
            self._add_ln(f"res{i}.ln_kv", "resampler")
            self._add_ff(rng, f"res{i}.ff", "resampler")
            self._add_ln(f"res{i}.ln_ff", "resampler")

        self.store.add("tok_emb", rng.normals((cfg.vocab_size, d), 0.5), "lm_block")
        self.store.add("pos_emb", rng.normals((cfg.max_seq_len, d), 0.5), "lm_block")
        for i in range(cfg.n_decoder_blocks):
            self._add_attn(rng, f"blk{i}.xattn", "gated_xattn")
            self._add_ln(f"blk{i}.xattn.ln", "gated_xattn")
            self.store.add(f"blk{i}.xattn.gate", np.zeros(1), "gated_xattn")
            self._add_ff(rng, f"blk{i}.xff", "gated_xattn")
            self._add_ln(f"blk{i}.xff.ln", "gated_xattn")
            self.store.add(f"blk{i}.xff.gate", np.zeros(1), "gated_xattn")
            self._add_attn(rng, f"blk{i}.attn", "lm_block")
            self._add_ln(f"blk{i}.attn.ln", "layernorm")
            self._add_ff(rng, f"blk{i}.ff", "lm_block")
            self._add_ln(f"blk{i}.ff.ln", "layernorm")
        self._add_ln("out.ln", "layernorm")
        self._add_linear(rng, "out.proj", d, cfg.vocab_size, "lm_block")

    def insert_adapters(self, seed: int = 0) -> None:
        """Add one bottleneck adapter after the cross-attention, self-attention,
        and feed-forward sublayers of every block. Exact identity at init
        (zero up-projection). Leaves adapters + layer norms trainable."""
        if self.adapters_inserted:
            raise ValueError("adapters already inserted")
        cfg = self.cfg
        rng = Rng(derive_seed(seed, "adapters"))
        for i in range(cfg.n_decoder_blocks):
            for site in ("adapter_xattn", "adapter_attn", "adapter_ff"):
                name = f"blk{i}.{site}"
                self.store.add(f"{name}.down.w",
                               rng.normals((cfg.d_model, cfg.adapter_bottleneck),
                                           1.0 / math.sqrt(cfg.d_model)), "adapter")
                self.store.add(f"{name}.down.b", np.zeros(cfg.adapter_bottleneck), "adapter")
                self.store.add(f"{name}.up.w", np.zeros((cfg.adapter_bottleneck, cfg.d_model)),
                               "adapter")
                self.store.add(f"{name}.up.b", np.zeros(cfg.d_model), "adapter")
        self.adapters_inserted = True
        self.set_partition("adapter")

    def set_partition(self, mode: str) -> None:
        """finetune: resampler + gated cross-attention trainable;
        adapter: adapters + layer norms trainable; none: everything frozen."""
        if mode == "finetune":
            self.store.set_trainable_groups({"resampler", "gated_xattn"})
        elif mode == "adapter":
            if not self.adapters_inserted:
                raise ValueError("adapter partition requires inserted adapters")
            self.store.set_trainable_groups({"adapter", "layernorm"})
        elif mode == "none":
            self.store.set_trainable_groups(set())
        elif mode == "pretrain":
            self.store.set_trainable_groups(
                {"lm_block", "resampler", "gated_xattn", "layernorm", "adapter"})
        else:
            raise ValueError(f"unknown partition mode {mode!r}")

    # ------------------------------------------------------------------
    # Vision path

    def encode_images(self, images: np.ndarray) -> np.ndarray:
        """Frozen patch features: [B, C, H, W] -> [B, n_patches, d_model].

        Pure numpy; the encoder never trains, so nothing is recorded.
        """
        cfg = self.cfg
        images = np.asarray(images, dtype=np.float64)
        single = images.ndim == 3
        if single:
            images = images[None]
        gh, gw = cfg.patch_grid
        ph = pw = cfg.patch_px
        expect = (cfg.channels, gh * ph, gw * pw)
        if images.shape[1:] != expect:
            raise ValueError(f"encode_images: expected image shape {expect}, got {images.shape[1:]}")
        b = images.shape[0]
        # [B, C, gh, ph, gw, pw] -> [B, gh, gw, C, ph, pw] -> [B, P, C*ph*pw]
        x = images.reshape(b, cfg.channels, gh, ph, gw, pw)
        x = x.transpose(0, 2, 4, 1, 3, 5).reshape(b, gh * gw, cfg.channels * ph * pw)
        feats = x @ self.store["venc.proj.w"].data + self.store["venc.proj.b"].data
        mu = feats.mean(axis=-1, keepdims=True)
        var = ((feats - mu) ** 2).mean(axis=-1, keepdims=True)
        feats = (feats - mu) / np.sqrt(var + 1e-5)
        feats = feats * self.store["venc.ln.g"].data + self.store["venc.ln.b"].data
        return feats[0] if single else feats

    def encode_image(self, image: np.ndarray) -> np.ndarray:
        return self.encode_images(image)

    def _ln(self, x: T.Tensor, name: str) -> T.Tensor:
        return T.layer_norm(x, self.store[f"{name}.g"], self.store[f"{name}.b"])

    def _linear(self, x: T.Tensor, name: str) -> T.Tensor:
        return T.add(T.matmul(x, self.store[f"{name}.w"]), self.store[f"{name}.b"])

    def _split_heads(self, x: T.Tensor) -> T.Tensor:
        b, t, d = x.shape
        h = self.cfg.n_heads
        return T.transpose(T.reshape(x, (b, t, h, d // h)), (0, 2, 1, 3))

    def _join_heads(self, x: T.Tensor) -> T.Tensor:
        b, h, t, dh = x.shape
        return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))

    def _mha(self, q_in: T.Tensor, kv_in: T.Tensor, name: str,
             causal_mask: np.ndarray | None = None) -> T.Tensor:
        dh = self.cfg.d_model // self.cfg.n_heads
        q = self._split_heads(self._linear(q_in, f"{name}.q"))
        k = self._split_heads(self._linear(kv_in, f"{name}.k"))
        v = self._split_heads(self._linear(kv_in, f"{name}.v"))
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), T.Tensor(1.0 / math.sqrt(dh)))
        if causal_mask is not None:
            scores = T.add(scores, T.Tensor(causal_mask))
        att = T.matmul(T.softmax(scores, axis=-1), v)
        return self._linear(self._join_heads(att), f"{name}.o")

    def resample(self, patch_feats: T.Tensor | np.ndarray) -> T.Tensor:
        """[B, n_patches, d] (or unbatched) -> visual tokens [B, n_latents, d]."""
        if not isinstance(patch_feats, T.Tensor):
            patch_feats = T.Tensor(patch_feats)
        single = patch_feats.ndim == 2
        if single:
            patch_feats = T.reshape(patch_feats, (1,) + patch_feats.shape)
        if self.cfg.patch_pos_emb:
            patch_feats = T.add(patch_feats, self.store["res.patch_pos"])
        lat = T.reshape(self.store["res.latents"], (1, self.cfg.n_latents, self.cfg.d_model))
        for i in range(self.cfg.n_resampler_blocks):
            q = self._ln(lat, f"res{i}.ln_q")
            kv = self._ln(patch_feats, f"res{i}.ln_kv")
            lat = T.add(lat, self._mha(q, kv, f"res{i}.attn"))
            h = self._ln(lat, f"res{i}.ln_ff")
            h = self._linear(T.gelu(self._linear(h, f"res{i}.ff.w1")), f"res{i}.ff.w2")
            lat = T.add(lat, h)
        if lat.shape[0] == 1 and patch_feats.shape[0] > 1:
            # resampler blocks left the batch axis broadcast; materialize it
            lat = T.add(lat, T.Tensor(np.zeros((patch_feats.shape[0], 1, 1))))
        return T.reshape(lat, lat.shape[1:]) if single else lat

    def visual_tokens(self, images: np.ndarray) -> T.Tensor:
        return self.resample(self.encode_images(images))

    # ------------------------------------------------------------------
    # Decoder

    def _ff(self, x: T.Tensor, name: str) -> T.Tensor:
        return self._linear(T.gelu(self._linear(x, f"{name}.w1")), f"{name}.w2")

    def _adapter(self, x: T.Tensor, name: str) -> T.Tensor:
        h = T.gelu(self._linear(x, f"{name}.down"))
        return T.add(x, self._linear(h, f"{name}.up"))

    def _gate(self, name: str) -> T.Tensor:
        return T.tanh(self.store[name])

    def _decoder(self, ids: np.ndarray, cross_fn) -> T.Tensor:
        """Shared decoder trunk. `cross_fn(block_index, normed_x)` returns the
        cross-attention read for that block."""
        cfg = self.cfg
        b, t = ids.shape
        if t > cfg.max_seq_len:
            raise ValueError(f"sequence length {t} exceeds max_seq_len {cfg.max_seq_len}")
        if ids.min() < 0 or ids.max() >= cfg.vocab_size:
            raise ValueError(f"token id out of range [0, {cfg.vocab_size})")
        x = T.add(T.embedding(self.store["tok_emb"], ids),
                  T.slice_(self.store["pos_emb"], (slice(0, t),)))
        mask = np.triu(np.full((t, t), NEG_MASK), k=1)
        for i in range(cfg.n_decoder_blocks):
            att = cross_fn(i, self._ln(x, f"blk{i}.xattn.ln"))
            x = T.add(x, T.mul(self._gate(f"blk{i}.xattn.gate"), att))
            if self.adapters_inserted:
                x = self._adapter(x, f"blk{i}.adapter_xattn")
            h = self._ff(self._ln(x, f"blk{i}.xff.ln"), f"blk{i}.xff")
            x = T.add(x, T.mul(self._gate(f"blk{i}.xff.gate"), h))
            h = self._ln(x, f"blk{i}.attn.ln")
            x = T.add(x, self._mha(h, h, f"blk{i}.attn", mask))
            if self.adapters_inserted:
                x = self._adapter(x, f"blk{i}.adapter_attn")
            x = T.add(x, self._ff(self._ln(x, f"blk{i}.ff.ln"), f"blk{i}.ff"))
            if self.adapters_inserted:
                x = self._adapter(x, f"blk{i}.adapter_ff")
        return self._linear(self._ln(x, "out.ln"), "out.proj")

    def decode_batch(self, vis: T.Tensor, ids: np.ndarray) -> T.Tensor:
        """One image per row: vis [B, L, d], ids [B, T] -> logits [B, T, V]."""
        return self._decoder(ids, lambda i, h: self._mha(h, vis, f"blk{i}.xattn"))

    def decode_prompt(self, vis_list: list[T.Tensor], ids: np.ndarray,
                      seg: np.ndarray) -> T.Tensor:
        """Interleaved prompt: each position cross-attends only to the visual
        tokens of its own (most recent preceding) image. ids [B, T] where all
        rows share the segment map `seg` (length T)."""
        seg = np.asarray(seg)
        if seg.shape != (ids.shape[1],):
            raise ValueError("seg must map every position to an image index")
        runs = []
        start = 0
        for t in range(1, len(seg) + 1):
            if t == len(seg) or seg[t] != seg[start]:
                runs.append((start, t, int(seg[start])))
                start = t

        def cross(i, h):
            outs = []
            for s, e, g in runs:
                q = T.slice_(h, (slice(None), slice(s, e)))
                outs.append(self._mha(q, vis_list[g], f"blk{i}.xattn"))
            return outs[0] if len(outs) == 1 else T.concat(outs, axis=1)

        return self._decoder(ids, cross)

    def decode_logits(self, visual_tokens: T.Tensor, text_tokens) -> T.Tensor:
        """Spec surface for a single sequence: [L, d] x [T] -> [T, V]."""
        ids = np.asarray(list(text_tokens))[None, :]
        vis = visual_tokens
        if vis.ndim == 2:
            vis = T.reshape(vis, (1,) + vis.shape)
        return T.reshape(self.decode_batch(vis, ids), (ids.shape[1], self.cfg.vocab_size))

    # ------------------------------------------------------------------
    # Losses

    def nll_mask(self, rows: list[list[int]], predict_from: list[int],
                 t_max: int) -> tuple[np.ndarray, np.ndarray]:
        """(padded ids [B, T], one-hot loss mask [B, T, V]) for teacher forcing.

        mask[b, t-1, rows[b][t]] = 1 for predict_from[b] <= t < len(rows[b]).
        """
        b = len(rows)
        ids = np.full((b, t_max), vocab.PAD, dtype=np.int64)
        mask = np.zeros((b, t_max, self.cfg.vocab_size))
        for r, row in enumerate(rows):
            ids[r, : len(row)] = row
            for t in range(predict_from[r], len(row)):
                mask[r, t - 1, row[t]] = 1.0
        return ids, mask

    def batch_nll(self, images: np.ndarray, rows: list[list[int]],
                  predict_from: list[int] | None = None) -> T.Tensor:
        """Per-sample sequence NLL [B]: -sum_t log P(token_t | <t, image)."""
        if predict_from is None:
            predict_from = [1] * len(rows)
        t_max = max(len(r) for r in rows)
        ids, mask = self.nll_mask(rows, predict_from, t_max)
        vis = self.visual_tokens(images)
        lsm = T.log_softmax(self.decode_batch(vis, ids), axis=-1)
        picked = T.sum_(T.sum_(T.mul(lsm, T.Tensor(mask)), axis=2), axis=1)
        return T.mul(picked, T.Tensor(-1.0))

    def sequence_nll(self, image: np.ndarray, tokens: list[int],
                     predict_from: int = 1) -> T.Tensor:
        """Scalar NLL of one (image, token sequence) pair, teacher-forced."""
        if len(tokens) < 2:
            raise ValueError("sequence_nll needs at least one predicted token")
        per = self.batch_nll(np.asarray(image)[None], [list(tokens)], [predict_from])
        return T.sum_(per)

    # ------------------------------------------------------------------
    # Inference helpers (no recording)

    def logits_np(self, image: np.ndarray, tokens: list[int]) -> np.ndarray:
        with T.no_grad():
            vis = self.visual_tokens(np.asarray(image)[None])
            return self.decode_batch(vis, np.asarray(list(tokens))[None]).data[0]

    def score_np(self, image: np.ndarray, tokens: list[int], predict_from: int = 1) -> float:
        with T.no_grad():
            return -float(self.sequence_nll(image, tokens, predict_from).item())


# ---------------------------------------------------------------------------
# Persistence (checkpoint + JSON manifest)


def save_model(path: str | Path, model: VLM) -> None:
    path = Path(path)
    save_checkpoint(path, model.store)
    manifest = {"config": model.cfg.to_json(), "adapters_inserted": model.adapters_inserted}
    path.with_suffix(".json").write_text(json.dumps(manifest, sort_keys=True, indent=1))


def load_model(path: str | Path) -> VLM:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    model = VLM(VLMConfig.from_json(manifest["config"]), seed=0)
    if manifest["adapters_inserted"]:
        model.insert_adapters(seed=0)
    load_into_store(path, model.store)
    return model
