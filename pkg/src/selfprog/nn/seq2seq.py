"""Character-level encoder-decoder transformer."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..dsl import TransformerSpec
from .layers import Embedding, FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, cross_entropy
from .network import BuildError

PAD, BOS, EOS = 0, 1, 2
SPECIALS = ("<pad>", "<bos>", "<eos>")
# every character the compact DSL forms can contain
COMPACT_ALPHABET = " 0123456789cdefhns"


@dataclass(frozen=True)
class CharVocab:
    alphabet: str = COMPACT_ALPHABET

    @property
    def size(self) -> int:
        return len(SPECIALS) + len(self.alphabet)

    def encode(self, text: str, max_len: int) -> list[int]:
        """Character ids followed by EOS, truncated to ``max_len`` tokens."""
        ids = [self.alphabet.index(ch) + len(SPECIALS) for ch in text if ch in self.alphabet]
        return (ids + [EOS])[:max_len]

    def decode(self, ids) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i >= len(SPECIALS):
                out.append(self.alphabet[i - len(SPECIALS)])
        return "".join(out)


def sinusoidal_positions(max_len: int, dim: int) -> np.ndarray:
    pos = np.arange(max_len)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class EncoderBlock(Module):
    def __init__(self, spec: TransformerSpec, rng, dtype):
        d = spec.d_model
        self.norm1 = LayerNorm(d, dtype=dtype)
        self.attn = MultiHeadAttention(d, spec.num_heads, rng, dtype)
        self.norm2 = LayerNorm(d, dtype=dtype)
        self.ffn = FeedForward(d, spec.d_ff, rng, dtype)

    def forward(self, x, mask):
        h = self.norm1.forward(x)
        x = x + self.attn.forward(h, h, mask)
        return x + self.ffn.forward(self.norm2.forward(x))

    def backward(self, g):
        g = g + self.norm2.backward(self.ffn.backward(g))
        dq, dkv = self.attn.backward(g)
        return g + self.norm1.backward(dq + dkv)


class DecoderBlock(Module):
    def __init__(self, spec: TransformerSpec, rng, dtype):
        d = spec.d_model
        self.norm1 = LayerNorm(d, dtype=dtype)
        self.self_attn = MultiHeadAttention(d, spec.num_heads, rng, dtype)
        self.norm2 = LayerNorm(d, dtype=dtype)
        self.cross_attn = MultiHeadAttention(d, spec.num_heads, rng, dtype)
        self.norm3 = LayerNorm(d, dtype=dtype)
        self.ffn = FeedForward(d, spec.d_ff, rng, dtype)

    def forward(self, y, memory, self_mask, cross_mask):
        h = self.norm1.forward(y)
        y = y + self.self_attn.forward(h, h, self_mask)
        y = y + self.cross_attn.forward(self.norm2.forward(y), memory, cross_mask)
        return y + self.ffn.forward(self.norm3.forward(y))

    def backward(self, g):
        """Returns (grad wrt block input, grad wrt encoder memory)."""
        g = g + self.norm3.backward(self.ffn.backward(g))
        dq, d_mem = self.cross_attn.backward(g)
        g = g + self.norm2.backward(dq)
        dq, dkv = self.self_attn.backward(g)
        return g + self.norm1.backward(dq + dkv), d_mem


class Seq2Seq(Module):
    """Pre-norm encoder-decoder with a shared character embedding."""

    def __init__(self, spec: TransformerSpec, vocab_size: int, max_len: int, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.spec = spec
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.dtype = dtype
        d = spec.d_model
        self.embed = Embedding(vocab_size, d, rng, dtype)
        self.encoder = [EncoderBlock(spec, rng, dtype) for _ in range(spec.num_encoder_layers)]
        self.enc_norm = LayerNorm(d, dtype=dtype)
        self.decoder = [DecoderBlock(spec, rng, dtype) for _ in range(spec.num_decoder_layers)]
        self.dec_norm = LayerNorm(d, dtype=dtype)
        self.head = Linear(d, vocab_size, rng, dtype, gain=0.5)
        self._pos = sinusoidal_positions(max_len + 1, d).astype(dtype)

    # -- forward pieces -------------------------------------------------

    def encode(self, src: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        cross_mask = (src != PAD)[:, None, None, :]
        x = self.embed.forward(src) + self._pos[: src.shape[1]]
        for block in self.encoder:
            x = block.forward(x, cross_mask)
        return self.enc_norm.forward(x), cross_mask

    def decode(self, tgt_in: np.ndarray, memory: np.ndarray, cross_mask: np.ndarray) -> np.ndarray:
        t = tgt_in.shape[1]
        causal = np.tril(np.ones((t, t), dtype=bool))[None, None]
        y = self.embed.forward(tgt_in) + self._pos[:t]
        for block in self.decoder:
            y = block.forward(y, memory, causal, cross_mask)
        return self.head.forward(self.dec_norm.forward(y))

    def loss_and_grad(self, batch) -> float:
        """Token-mean cross entropy of ``tgt`` given ``src``; fills gradients."""
        src, tgt_in, tgt_out = batch
        memory, cross_mask = self.encode(src)
        logits = self.decode(tgt_in, memory, cross_mask)
        loss, g = cross_entropy(logits, tgt_out, tgt_out != PAD)
        g = self.dec_norm.backward(self.head.backward(g))
        d_mem = np.zeros_like(memory)
        for block in reversed(self.decoder):
            g, dm = block.backward(g)
            d_mem += dm
        self.embed.backward(tgt_in, g)
        g = self.enc_norm.backward(d_mem)
        for block in reversed(self.encoder):
            g = block.backward(g)
        self.embed.backward(src, g)
        return loss

    def loss(self, batch) -> float:
        src, tgt_in, tgt_out = batch
        memory, cross_mask = self.encode(src)
        logits = self.decode(tgt_in, memory, cross_mask)
        return cross_entropy(logits, tgt_out, tgt_out != PAD)[0]

    # -- sampling -------------------------------------------------------

    def generate(
        self,
        src_ids: list[int],
        n: int,
        rng: np.random.Generator,
        temperature: float = 1.0,
        top_k: int = 16,
    ) -> list[list[int]]:
        """``n`` sampled decodings of one source; temperature 0 is greedy."""
        src = np.asarray([src_ids[: self.max_len]] * n, dtype=np.int64)
        memory, cross_mask = self.encode(src)
        out = np.full((n, 1), BOS, dtype=np.int64)
        done = np.zeros(n, dtype=bool)
        for _ in range(self.max_len):
            logits = self.decode(out, memory, cross_mask)[:, -1].astype(np.float64)
            logits[:, PAD] = -np.inf
            logits[:, BOS] = -np.inf
            nxt = sample_logits(logits, rng, temperature, top_k)
            nxt[done] = PAD
            out = np.concatenate([out, nxt[:, None]], axis=1)
            done |= nxt == EOS
            if done.all():
                break
        return [row[1:].tolist() for row in out]


def sample_logits(logits: np.ndarray, rng: np.random.Generator, temperature: float, top_k: int) -> np.ndarray:
    if temperature <= 0:
        return logits.argmax(axis=-1)
    z = logits / temperature
    if 0 < top_k < z.shape[-1]:
        kth = np.sort(z, axis=-1)[:, -top_k][:, None]
        z = np.where(z >= kth, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    u = rng.random((len(p), 1))
    idx = (np.cumsum(p, axis=-1) < u).sum(axis=-1)
    return np.minimum(idx, p.shape[-1] - 1)


def build_seq2seq(spec: TransformerSpec, vocab_size: int, max_len: int, seed: int = 0, dtype=np.float32) -> Seq2Seq:
    if not isinstance(spec, TransformerSpec):
        raise BuildError("build_seq2seq needs a TransformerSpec")
    if spec.d_model % spec.num_heads:
        raise BuildError("num_heads must divide d_model")
    if vocab_size < len(SPECIALS) + 1 or max_len < 1:
        raise BuildError("vocabulary and max_len must be positive")
    return Seq2Seq(spec, vocab_size, max_len, seed, dtype)


def seq2seq_param_count(spec: TransformerSpec, vocab_size: int) -> int:
    """Closed-form trainable-scalar count of ``build_seq2seq(spec, vocab_size, ...)``."""
    d, f = spec.d_model, spec.d_ff
    norm = 2 * d
    attn = 4 * (d * d + d)
    ffn = d * f + f + f * d + d
    enc = 2 * norm + attn + ffn
    dec = 3 * norm + 2 * attn + ffn
    return (
        vocab_size * d
        + spec.num_encoder_layers * enc
        + spec.num_decoder_layers * dec
        + 2 * norm
        + d * vocab_size
        + vocab_size
    )


def make_batch(pairs_ids: list[tuple[list[int], list[int]]]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pad (src ids, tgt ids) pairs into src, decoder input and decoder target arrays."""
    s_len = max(len(s) for s, _ in pairs_ids)
    t_len = max(len(t) for _, t in pairs_ids)
    src = np.full((len(pairs_ids), s_len), PAD, dtype=np.int64)
    tgt_in = np.full((len(pairs_ids), t_len), PAD, dtype=np.int64)
    tgt_out = np.full((len(pairs_ids), t_len), PAD, dtype=np.int64)
    for i, (s, t) in enumerate(pairs_ids):
        src[i, : len(s)] = s
        tgt_out[i, : len(t)] = t
        tgt_in[i, 0] = BOS
        tgt_in[i, 1 : len(t)] = t[:-1]
    return src, tgt_in, tgt_out


class TokenPairs:
    """Tokenised (source, target) pairs usable as training data."""

    def __init__(self, ids: list[tuple[list[int], list[int]]]):
        self.ids = ids

    def __len__(self) -> int:
        return len(self.ids)

    def batch(self, indices):
        return make_batch([self.ids[i] for i in indices])

    def head(self, n: int) -> "TokenPairs":
        return TokenPairs(self.ids[:n])

    def take(self, indices) -> "TokenPairs":
        return TokenPairs([self.ids[i] for i in indices])
