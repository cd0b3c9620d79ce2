"""Symmetric encoder-decoder assembly, task heads, and parameter accounting.

The encoder interleaves intra-set and inter-set mixing blocks with
mixing-based transition-down stages; the decoder replays the stored
down-sampling maps in reverse (their CSR inverses), so no neighbor search
ever runs while decoding. Setting ``use_hier=False`` swaps the transitions
for the asymmetric baseline: max-pool down, 3-nearest inverse-square-distance
interpolation up, the latter rebuilding a kNN map at decode time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geom
from .autodiff import (
    Tensor,
    as_tensor,
    gather_rows,
    gelu,
    max_axis1,
    reduce_mean,
    reduce_sum,
    reshape,
)
from .geom import HierarchyLevel, InverseNeighborMap, NeighborMap
from .mixer import MixerBlockParams, PointMixerParams, mixer_block, hier_down_mix, hier_up_mix
from .nn import LayerNorm, Linear, Mlp2, ParamStore, Rng, dropout

__all__ = [
    "LevelSpec",
    "ClassificationHead",
    "DenseHead",
    "NetworkConfig",
    "Network",
    "Plan",
    "build_network",
    "forward_classify",
    "forward_dense",
    "param_count",
    "default_levels",
]


@dataclass
class LevelSpec:
    width: int
    blocks: int
    ratio: float


@dataclass
class ClassificationHead:
    num_classes: int
    dropout: float = 0.5


@dataclass
class DenseHead:
    out_channels: int


def default_levels() -> list[LevelSpec]:
    """Desk-scale default: 4 levels, widths doubling, quarter down-sampling."""
    return [
        LevelSpec(32, 1, 1.0),
        LevelSpec(64, 1, 0.25),
        LevelSpec(128, 1, 0.25),
        LevelSpec(256, 1, 0.25),
    ]


@dataclass
class NetworkConfig:
    levels: list[LevelSpec]
    head: ClassificationHead | DenseHead
    k: int = 16
    in_channels: int = 3
    use_intra: bool = True
    use_inter: bool = True
    use_hier: bool = True
    variant: str = "softmax"
    expansion: int = 2
    reduction: int = 4
    pe_width: int | None = None
    tokenmlp_pos: bool = False

    def validate(self):
        if not self.levels:
            raise ValueError("at least one level required")
        if self.levels[0].ratio != 1.0:
            raise ValueError("level 0 must keep every point (ratio 1.0)")
        for spec in self.levels:
            if spec.width < 1 or spec.blocks < 0:
                raise ValueError("widths must be >= 1 and block counts >= 0")
            if not (0.0 < spec.ratio <= 1.0):
                raise ValueError("ratios must lie in (0, 1]")
        for spec in self.levels[1:]:
            if spec.ratio == 1.0:
                raise ValueError("only level 0 may have ratio 1.0")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.variant == "tokenmlp" and self.use_inter:
            raise ValueError(
                "token-MLP mixing cannot run over inverse maps (variable cardinality); "
                "disable inter-set mixing for this variant"
            )
        if isinstance(self.head, DenseHead) and len(self.levels) > 1 and not self.levels:
            raise ValueError("unreachable")


@dataclass
class Plan:
    """Per-cloud geometry reused across forward passes: positions, the
    hierarchy (down maps + inverses + fallbacks), and same-level kNN maps."""

    positions: list[np.ndarray]
    levels: list[HierarchyLevel]
    sl_maps: list[NeighborMap]
    sl_invs: list[InverseNeighborMap | None]


@dataclass
class _TransitionDown:
    norm: LayerNorm
    mix: PointMixerParams | None  # None for the max-pool baseline
    lin: Linear


@dataclass
class _TransitionUp:
    norm: LayerNorm
    expand: Linear
    mix: PointMixerParams | None  # None for the trilinear baseline


@dataclass
class Network:
    config: NetworkConfig
    store: ParamStore
    embed: Linear
    enc_blocks: list[list[tuple[str, MixerBlockParams]]]
    downs: list[_TransitionDown]
    ups: list[_TransitionUp]
    dec_blocks: list[list[tuple[str, MixerBlockParams]]]
    head_fc1: Linear
    head_fc2: Linear
    last_decode_knn_calls: int | None = None

    def prepare(self, positions: np.ndarray) -> Plan:
        """Build every index structure a forward pass needs (encode side)."""
        cfg = self.config
        pos = np.asarray(positions, dtype=np.float64)
        n = len(pos)
        sizes = [n]
        for spec in cfg.levels[1:]:
            sizes.append(max(1, int(np.floor(spec.ratio * sizes[-1] + 0.5))))
        ratios = [spec.ratio for spec in cfg.levels]
        k_down = [min(cfg.k, sizes[max(0, i - 1)]) for i in range(len(cfg.levels))]
        hier = geom.build_hierarchy(pos, ratios, k_down, start=geom.lexmin_index(pos))
        level_pos = [lv.positions for lv in hier.levels]
        sl_maps, sl_invs = [], []
        for li, lv in enumerate(hier.levels):
            if li == 0:
                m = lv.down_map  # identity level: the down map is the same-level map
            else:
                m = geom.knn(lv.positions, lv.positions, min(cfg.k, lv.n))
            sl_maps.append(m)
            sl_invs.append(geom.invert_map(m) if cfg.use_inter else None)
        return Plan(level_pos, hier.levels, sl_maps, sl_invs)

    def state(self):
        return self.store.state()


def _block_list(store, prefix, cfg: NetworkConfig, spec: LevelSpec, rng) -> list[tuple[str, MixerBlockParams]]:
    out = []
    for b in range(spec.blocks):
        if cfg.use_intra:
            out.append(
                ("intra", MixerBlockParams.create(
                    store, f"{prefix}.b{b}.intra", spec.width, rng,
                    variant=cfg.variant, expansion=cfg.expansion, k=cfg.k,
                    pe_width=cfg.pe_width, reduction=cfg.reduction, tokenmlp_pos=cfg.tokenmlp_pos,
                ))
            )
        if cfg.use_inter:
            out.append(
                ("inter", MixerBlockParams.create(
                    store, f"{prefix}.b{b}.inter", spec.width, rng,
                    variant=cfg.variant, expansion=cfg.expansion, k=cfg.k,
                    pe_width=cfg.pe_width, reduction=cfg.reduction,
                ))
            )
    return out


def build_network(config: NetworkConfig, rng: Rng) -> Network:
    """Deterministic construction; parameter names are stable across runs."""
    config.validate()
    store = ParamStore()
    embed = Linear.create(store, "embed", config.in_channels, config.levels[0].width, rng)

    enc_blocks, downs = [], []
    for li, spec in enumerate(config.levels):
        if li > 0:
            prev_w = config.levels[li - 1].width
            if config.use_hier:
                downs.append(_TransitionDown(
                    LayerNorm.create(store, f"td{li}.norm", prev_w),
                    PointMixerParams.create(store, f"td{li}.mix", prev_w, rng,
                                            pe_width=config.pe_width, reduction=config.reduction),
                    Linear.create(store, f"td{li}.reduce", prev_w, spec.width, rng),
                ))
            else:
                downs.append(_TransitionDown(
                    LayerNorm.create(store, f"td{li}.norm", prev_w),
                    None,
                    Linear.create(store, f"td{li}.reduce", prev_w, spec.width, rng),
                ))
        enc_blocks.append(_block_list(store, f"enc{li}", config, spec, rng))

    ups, dec_blocks = [], []
    if isinstance(config.head, DenseHead):
        for li in range(len(config.levels) - 1):
            spec = config.levels[li]
            next_w = config.levels[li + 1].width
            if config.use_hier:
                ups.append(_TransitionUp(
                    LayerNorm.create(store, f"tu{li}.norm", next_w),
                    Linear.create(store, f"tu{li}.expand", next_w, spec.width, rng),
                    PointMixerParams.create(store, f"tu{li}.mix", spec.width, rng,
                                            pe_width=config.pe_width, reduction=config.reduction),
                ))
            else:
                ups.append(_TransitionUp(
                    LayerNorm.create(store, f"tu{li}.norm", next_w),
                    Linear.create(store, f"tu{li}.expand", next_w, spec.width, rng),
                    None,
                ))
            dec_blocks.append(_block_list(store, f"dec{li}", config, spec, rng))

    if isinstance(config.head, ClassificationHead):
        w = config.levels[-1].width
        fc1 = Linear.create(store, "head.fc1", w, w, rng)
        fc2 = Linear.create(store, "head.fc2", w, config.head.num_classes, rng)
    else:
        w = config.levels[0].width
        fc1 = Linear.create(store, "head.fc1", w, w, rng)
        fc2 = Linear.create(store, "head.fc2", w, config.head.out_channels, rng)

    return Network(config, store, embed, enc_blocks, downs, ups, dec_blocks, fc1, fc2)


def _apply_blocks(x, blocks, plan: Plan, li: int):
    for kind, block in blocks:
        index_map = plan.sl_maps[li] if kind == "intra" else plan.sl_invs[li]
        x = mixer_block(x, plan.positions[li], index_map, block)
    return x


def _transition_down(net: Network, x, plan: Plan, li: int):
    td = net.downs[li - 1]
    lv = plan.levels[li]
    h = td.norm(x)
    if td.mix is not None:
        mixed = hier_down_mix(h, plan.positions[li - 1], plan.positions[li], lv.down_map, td.mix)
        return td.lin(mixed)
    # asymmetric baseline: project then max-pool over the down-map neighborhood
    proj = td.lin(h)
    n_s, k = lv.down_map.indices.shape
    gathered = reshape(gather_rows(proj, lv.down_map.indices.ravel()), (n_s, k, proj.shape[-1]))
    return max_axis1(gathered)


def _transition_up(net: Network, x, skip, plan: Plan, li: int):
    """Up from level ``li`` to ``li - 1``."""
    tu = net.ups[li - 1]
    lv = plan.levels[li]
    g = tu.expand(tu.norm(x))
    if tu.mix is not None:
        return hier_up_mix(g, plan.positions[li], plan.positions[li - 1], lv.down_inverse,
                           tu.mix, skip=skip, fallback=lv.up_fallback)
    # asymmetric baseline: fresh 3-NN search at decode time, inverse-square weights
    pos_o, pos_s = plan.positions[li - 1], plan.positions[li]
    m3 = geom.knn(pos_s, pos_o, min(3, len(pos_s)))
    d2 = np.sum((pos_o[:, None, :] - pos_s[m3.indices]) ** 2, axis=-1)
    w = 1.0 / (d2 + 1e-10)
    w /= w.sum(axis=1, keepdims=True)
    n_o, kk = m3.indices.shape
    gathered = reshape(gather_rows(g, m3.indices.ravel()), (n_o, kk, g.shape[-1]))
    interp = reduce_sum(gathered * Tensor(w[:, :, None]), axis=1)
    return interp + skip


def _encode(net: Network, plan: Plan, feats):
    x = net.embed(as_tensor(feats))
    skips = []
    for li in range(len(net.config.levels)):
        if li > 0:
            x = _transition_down(net, x, plan, li)
        x = _apply_blocks(x, net.enc_blocks[li], plan, li)
        skips.append(x)
    return x, skips


def forward_classify(net: Network, cloud, plan: Plan | None = None,
                     training: bool = False, rng: Rng | None = None) -> Tensor:
    """Encoder-only pass, mean pooling over the deepest level, FC head."""
    if not isinstance(net.config.head, ClassificationHead):
        raise ValueError("network has no classification head")
    positions = cloud.positions if hasattr(cloud, "positions") else np.asarray(cloud)
    feats = cloud.features if hasattr(cloud, "features") else positions
    if len(positions) == 0:
        raise ValueError("empty cloud")
    plan = plan or net.prepare(positions)
    x, _ = _encode(net, plan, feats)
    pooled = reduce_mean(x, axis=0)
    h = gelu(net.head_fc1(pooled))
    if training:
        h = dropout(h, net.config.head.dropout, rng or Rng(0), training=True)
    return net.head_fc2(h)


def forward_dense(net: Network, cloud, plan: Plan | None = None) -> Tensor:
    """Full U-shaped pass producing one output row per input point.

    With hierarchical mixing the decoder only replays stored inverse maps;
    ``last_decode_knn_calls`` records how many kNN searches the decode phase
    actually ran (0 for the symmetric design).
    """
    if not isinstance(net.config.head, DenseHead):
        raise ValueError("network has no dense head")
    positions = cloud.positions if hasattr(cloud, "positions") else np.asarray(cloud)
    feats = cloud.features if hasattr(cloud, "features") else positions
    if len(positions) == 0:
        raise ValueError("empty cloud")
    plan = plan or net.prepare(positions)
    x, skips = _encode(net, plan, feats)
    calls_before = geom.knn_call_count()
    for li in range(len(net.config.levels) - 1, 0, -1):
        x = _transition_up(net, x, skips[li - 1], plan, li)
        x = _apply_blocks(x, net.dec_blocks[li - 1], plan, li - 1)
    net.last_decode_knn_calls = geom.knn_call_count() - calls_before
    return net.head_fc2(gelu(net.head_fc1(x)))


def param_count(net: Network) -> int:
    """Total scalar parameters, momentum buffers excluded."""
    return net.store.param_count()
