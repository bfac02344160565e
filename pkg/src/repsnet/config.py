"""Flat ``key = value`` run configuration.

Desk-scale defaults.  Full-scale values used for the radiology benchmarks
are noted next to the fields they replace.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

from .contrastive import ContrastiveConfig
from .decoder import DecoderConfig, GenerationConstraints
from .encoder import EncoderConfig
from .errors import ContractError


@dataclass(frozen=True)
class Config:
    seed: int = 0
    # derived from the training data when 0
    vocab_size: int = 0
    n_classes: int = 0
    # encoder (full scale: 14x14 grid of 2048-d ResNeXt features)
    image_size: int = 16
    patch_size: int = 4
    d_x: int = 32
    d_q: int = 32
    d: int = 16
    glimpses: int = 2
    ban_rank: int = 8
    text_layers: int = 2
    text_heads: int = 2
    max_question_tokens: int = 12
    norm_mean: float = 0.5
    norm_std: float = 0.5
    augment: bool = True
    erase_prob: float = 0.5
    # contrastive alignment
    tau: float = 0.07
    alpha_l: float = 1.0
    # decoder
    dec_layers: int = 2
    dec_heads: int = 2
    dec_width: int = 64
    ffn_mult: int = 4
    max_tokens: int = 200
    # classifier (full scale: 1024)
    cls_hidden: int = 64
    # prior context
    use_context: bool = True
    k: int = 1
    retrieval_key: str = "fused"
    # generation
    min_len: int = 5
    no_repeat_ngram: int = 2
    beam: int = 1
    # optimisation (full scale: batch 16-64, 100-200 epochs)
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    batch_size: int = 8
    epochs: int = 20
    min_occurrence: int = 0
    init_std: float = 0.02
    # data
    train_data: str = ""
    eval_data: str = ""

    def __post_init__(self):
        validate(self)

    def encoder(self) -> EncoderConfig:
        return EncoderConfig(
            vocab_size=self.vocab_size, image_size=self.image_size, patch_size=self.patch_size,
            d_x=self.d_x, d_q=self.d_q, d=self.d, glimpses=self.glimpses, rank=self.ban_rank,
            text_layers=self.text_layers, text_heads=self.text_heads, max_len=self.max_tokens,
            ffn_mult=self.ffn_mult,
        )

    def decoder(self) -> DecoderConfig:
        return DecoderConfig(
            vocab_size=self.vocab_size, layers=self.dec_layers, heads=self.dec_heads,
            width=self.dec_width, max_len=self.max_tokens, d_x=self.d_x, ffn_mult=self.ffn_mult,
        )

    def contrastive(self) -> ContrastiveConfig:
        return ContrastiveConfig(tau=self.tau, alpha=self.alpha_l)

    def constraints(self) -> GenerationConstraints:
        return GenerationConstraints(self.min_len, self.no_repeat_ngram, self.max_tokens - 1, self.beam)

    def with_(self, **kw) -> "Config":
        return replace(self, **kw)


_POSITIVE = {
    "image_size", "patch_size", "d_x", "d_q", "glimpses", "ban_rank", "text_layers",
    "text_heads", "max_question_tokens", "dec_layers", "dec_heads", "dec_width", "ffn_mult",
    "cls_hidden", "k", "beam", "batch_size", "tau", "norm_std", "lr", "adam_eps", "init_std",
}
_NON_NEGATIVE = {
    "seed", "vocab_size", "n_classes", "alpha_l", "min_len", "no_repeat_ngram",
    "weight_decay", "epochs", "min_occurrence", "norm_mean",
}


def validate(cfg: Config) -> None:
    for name in _POSITIVE:
        if getattr(cfg, name) <= 0:
            raise ContractError(f"config key {name!r} must be positive")
    for name in _NON_NEGATIVE:
        if getattr(cfg, name) < 0:
            raise ContractError(f"config key {name!r} must be non-negative")
    for name in ("beta1", "beta2", "erase_prob"):
        v = getattr(cfg, name)
        if not 0 <= v < 1 and not (name == "erase_prob" and v == 1):
            raise ContractError(f"config key {name!r} must lie in [0, 1)")
    if cfg.d < 2:
        raise ContractError("config key 'd' must be >= 2")
    if cfg.image_size % cfg.patch_size:
        raise ContractError("config key 'image_size' must be a multiple of 'patch_size'")
    if cfg.d_q % cfg.text_heads or cfg.dec_width % cfg.dec_heads:
        raise ContractError("widths must be divisible by their head counts")
    if not 5 <= cfg.max_tokens <= 200:
        raise ContractError("config key 'max_tokens' must lie in 5..200")
    if cfg.max_question_tokens > cfg.max_tokens:
        raise ContractError("config key 'max_question_tokens' exceeds 'max_tokens'")
    if cfg.min_len >= cfg.max_tokens - 1:
        raise ContractError("config key 'min_len' must be below 'max_tokens' - 1")
    if cfg.retrieval_key not in ("fused", "image"):
        raise ContractError("config key 'retrieval_key' must be 'fused' or 'image'")


_TYPES = {f.name: f.type for f in fields(Config)}


def _convert(key: str, raw: str):
    typ = _TYPES[key]
    try:
        if typ == "bool":
            low = raw.lower()
            if low not in ("true", "false"):
                raise ValueError(raw)
            return low == "true"
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
    except ValueError as err:
        raise ContractError(f"config key {key!r}: cannot parse {raw!r} as {typ}") from err
    return raw


def parse_config(text: str, base: Config = Config()) -> Config:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractError(f"config line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _TYPES:
            raise ContractError(f"unknown config key {key!r} (line {lineno})")
        values[key] = _convert(key, raw)
    return replace(base, **values)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_config(cfg: Config) -> str:
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in asdict(cfg).items())


def load_config(path) -> Config:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def save_config(cfg: Config, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_config(cfg))
