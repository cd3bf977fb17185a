"""Analytic operation counting for the networks and pipeline variants.

Conventions, applied uniformly to our nets and the baselines so ratios are
convention-independent: a convolution costs 2 * Kh*Kw*Cin*Cout*Hout*Wout
(multiplies and adds counted separately); pooling, normalization and other
elementwise work costs 1 op per output element. All counts are exact
integers derived from layer plans emitted by the actual model definitions.

Published full-scale reference totals (VGA input) are carried along purely
for side-by-side display; the desk-scale nets do not claim to match them.
"""

from __future__ import annotations

from dataclasses import dataclass

from .backbone import TrunkConfig
from .errors import ShapeError
from .kernels import conv_out_extent
from .scale_forecast import NUM_BINS, SF_INPUT_DIM

REFERENCE_FULL_SCALE = {
    "scale_forecast": 95.67e6,
    "rsa_max": 182.42e6,
    "lrn_max": 1.3e9,
    "pipeline_min": 95.67e6,
    "pipeline_max": 1.5e9,
    "baseline_single_anchor": 1.72e9,
    "baseline_multi_anchor": 1.31e9,
}


@dataclass(frozen=True)
class Layer:
    kind: str  # conv | pool | elementwise | fc
    name: str
    cin: int
    cout: int
    k: int = 1
    stride: int = 1
    pad: int = 0


def _block_layers(name: str, cin: int, cout: int, stride: int) -> list[Layer]:
    layers = [
        Layer("conv", f"{name}.conv1", cin, cout, 3, stride, 1),
        Layer("elementwise", f"{name}.n1+relu", cout, cout),
        Layer("conv", f"{name}.conv2", cout, cout, 3, 1, 1),
        Layer("elementwise", f"{name}.n2", cout, cout),
    ]
    if stride != 1 or cin != cout:
        layers.append(Layer("conv", f"{name}.proj", cin, cout, 1, stride, 0))
        layers.append(Layer("elementwise", f"{name}.nproj", cout, cout))
    layers.append(Layer("elementwise", f"{name}.add+relu", cout, cout))
    return layers


def trunk_plan(cfg: TrunkConfig | None = None) -> list[Layer]:
    cfg = cfg or TrunkConfig()
    return [
        Layer("conv", "conv1", 3, cfg.conv1_width, 7, 2, 3),
        Layer("elementwise", "n1+relu", cfg.conv1_width, cfg.conv1_width),
        Layer("pool", "pool1", cfg.conv1_width, cfg.conv1_width, 3, 2, 1),
        *_block_layers("res2a", cfg.conv1_width, cfg.stage2_width, 2),
        *_block_layers("res2b", cfg.stage2_width, cfg.stage2_width, 1),
    ]


def head_plan(cfg: TrunkConfig | None = None) -> list[Layer]:
    cfg = cfg or TrunkConfig()
    return [
        *_block_layers("res3a", cfg.stage2_width, cfg.stage3_width, 1),
        *_block_layers("res3b", cfg.stage3_width, cfg.stage3_width, 1),
        *_block_layers("res3c", cfg.stage3_width, cfg.stage3_width, 1),
        Layer("conv", "landmark_maps", cfg.stage3_width, 5, 1, 1, 0),
        Layer("elementwise", "landmark_sigmoid", 5, 5),
        Layer("conv", "cls", cfg.stage3_width, 2, 1, 1, 0),
        Layer("elementwise", "cls_softmax", 2, 2),
        Layer("conv", "reg", cfg.stage3_width, 10, 1, 1, 0),
    ]


def rsa_plan(channels: int) -> list[Layer]:
    return [
        Layer("conv", "rsa.c1", channels, channels, 1, 1, 0),
        Layer("elementwise", "rsa.relu1", channels, channels),
        Layer("conv", "rsa.c2", channels, channels, 3, 2, 1),
        Layer("elementwise", "rsa.relu2", channels, channels),
        Layer("conv", "rsa.c3", channels, channels, 3, 1, 1),
        Layer("elementwise", "rsa.relu3", channels, channels),
        Layer("conv", "rsa.c4", channels, channels, 1, 1, 0),
    ]


def sf_plan(cfg: TrunkConfig | None = None) -> list[Layer]:
    cfg = cfg or TrunkConfig()
    plan = trunk_plan(cfg) + [
        *_block_layers("res3a", cfg.stage2_width, cfg.stage3_width, 1),
        *_block_layers("res3b", cfg.stage3_width, cfg.stage3_width, 1),
        *_block_layers("res3c", cfg.stage3_width, cfg.stage3_width, 1),
        Layer("pool", "gap", cfg.stage3_width, cfg.stage3_width, 0, 1, 0),
        Layer("fc", "fc", cfg.stage3_width, NUM_BINS),
    ]
    return plan


def count_ops(plan: list[Layer], in_dims: tuple[int, int]):
    """Walk a layer plan at the given input extents.

    Returns (total ops, per-layer list of (layer, ops, out_dims), out_dims).
    """
    h, w = in_dims
    cin = plan[0].cin
    per_layer = []
    total = 0
    for layer in plan:
        if layer.kind in ("conv", "pool") and layer.cin != cin:
            raise ShapeError(f"layer {layer.name} expects {layer.cin} channels, chain carries {cin}")
        if layer.kind == "conv":
            ho = conv_out_extent(h, layer.k, layer.stride, layer.pad)
            wo = conv_out_extent(w, layer.k, layer.stride, layer.pad)
            ops = 2 * layer.k * layer.k * layer.cin * layer.cout * ho * wo
            h, w = ho, wo
        elif layer.kind == "pool":
            if layer.k == 0:  # global average
                ho = wo = 1
                ops = layer.cout * h * w
            else:
                ho = conv_out_extent(h, layer.k, layer.stride, layer.pad)
                wo = conv_out_extent(w, layer.k, layer.stride, layer.pad)
                ops = layer.cout * ho * wo
            h, w = ho, wo
        elif layer.kind == "elementwise":
            ops = layer.cout * h * w
        elif layer.kind == "fc":
            ops = 2 * layer.cin * layer.cout
        else:
            raise ShapeError(f"unknown layer kind {layer.kind}")
        cin = layer.cout
        total += ops
        per_layer.append((layer, ops, (h, w)))
    return total, per_layer, (h, w)


def _map_dims(image_dims: tuple[int, int]) -> tuple[int, int]:
    h, w = image_dims
    for _ in range(3):
        h, w = (h + 1) // 2, (w + 1) // 2
    return h, w


def _halved(dims: tuple[int, int], times: int) -> tuple[int, int]:
    h, w = dims
    for _ in range(times):
        h, w = (h + 1) // 2, (w + 1) // 2
    return h, w


def compare_pipelines(octaves, image_dims: tuple[int, int], cfg: TrunkConfig | None = None) -> dict:
    """Op counts for the rollout pipeline vs the recompute-per-scale baseline.

    image_dims are the dims after the forecast-driven resize, i.e. the
    level-0 input. The detection-path comparison (single trunk pass +
    rollouts + heads vs trunk pass per scale + the same heads) is what the
    efficiency claim quantifies; the forecast net cost is reported alongside
    and included in the full-pipeline total.
    """
    octaves = sorted(set(octaves))
    if not octaves:
        raise ValueError("need at least one scale")
    cfg = cfg or TrunkConfig()
    levels = [o - octaves[0] for o in octaves]
    rollouts = levels[-1]

    sf_h = SF_INPUT_DIM
    sf_w = max(1, round(SF_INPUT_DIM * image_dims[1] / image_dims[0]))
    if image_dims[1] > image_dims[0]:
        sf_w = SF_INPUT_DIM
        sf_h = max(1, round(SF_INPUT_DIM * image_dims[0] / image_dims[1]))
    sf_total, _, _ = count_ops(sf_plan(cfg), (sf_h, sf_w))

    trunk0, _, map0 = count_ops(trunk_plan(cfg), image_dims)
    rsa_steps = []
    prev = map0
    for m in range(1, rollouts + 1):
        ops, _, prev = count_ops(rsa_plan(cfg.cut_channels), prev)
        rsa_steps.append(ops)

    head_per_level = {}
    for lv in levels:
        head_per_level[lv], _, _ = count_ops(head_plan(cfg), _halved(map0, lv))

    trunk_per_level = {0: trunk0}
    for lv in levels:
        if lv not in trunk_per_level:
            trunk_per_level[lv], _, _ = count_ops(trunk_plan(cfg), _halved(image_dims, lv))
    # the <25% claim compares each extra rollout to recomputing the trunk at that level
    rollout_vs_trunk = {}
    for m in range(1, rollouts + 1):
        t, _, _ = count_ops(trunk_plan(cfg), _halved(image_dims, m))
        rollout_vs_trunk[m] = (rsa_steps[m - 1], t)

    heads_total = sum(head_per_level.values())
    rsa_detection = trunk0 + sum(rsa_steps) + heads_total
    baseline_detection = sum(trunk_per_level[lv] for lv in levels) + heads_total
    return {
        "octaves": octaves,
        "image_dims": list(image_dims),
        "scale_forecast": sf_total,
        "trunk_once": trunk0,
        "rsa_steps": rsa_steps,
        "heads_per_level": head_per_level,
        "rollout_vs_trunk": rollout_vs_trunk,
        "rsa_detection_total": rsa_detection,
        "baseline_detection_total": baseline_detection,
        "rsa_pipeline_total": sf_total + rsa_detection,
        "savings_ratio": baseline_detection / rsa_detection if rsa_detection else float("inf"),
        "reference_full_scale": dict(REFERENCE_FULL_SCALE),
    }


def _fmt(n: float) -> str:
    if n >= 1e9:
        return f"{n / 1e9:.2f}G"
    if n >= 1e6:
        return f"{n / 1e6:.2f}M"
    if n >= 1e3:
        return f"{n / 1e3:.1f}K"
    return f"{n:.0f}"


def render_table(report: dict) -> str:
    """Aligned text table with the desk-scale counts next to the published
    full-scale reference totals."""
    ref = report["reference_full_scale"]
    rows = [
        ("component", "desk-scale ops", "full-scale reference"),
        ("scale-forecast", _fmt(report["scale_forecast"]), _fmt(ref["scale_forecast"])),
        (
            "rsa rollouts",
            _fmt(sum(report["rsa_steps"])) if report["rsa_steps"] else "0",
            f"0 to {_fmt(ref['rsa_max'])}",
        ),
        (
            "trunk+heads",
            _fmt(report["trunk_once"] + sum(report["heads_per_level"].values())),
            f"0 to {_fmt(ref['lrn_max'])}",
        ),
        (
            "total pipeline",
            _fmt(report["rsa_pipeline_total"]),
            f"{_fmt(ref['pipeline_min'])} to {_fmt(ref['pipeline_max'])}",
        ),
        (
            "recompute baseline",
            _fmt(report["baseline_detection_total"]),
            _fmt(ref["baseline_single_anchor"]),
        ),
    ]
    widths = [max(len(r[i]) for r in rows) for i in range(3)]
    lines = []
    for i, r in enumerate(rows):
        lines.append("  ".join(c.ljust(widths[j]) for j, c in enumerate(r)))
        if i == 0:
            lines.append("  ".join("-" * widths[j] for j in range(3)))
    lines.append(
        f"detection-path savings: x{report['savings_ratio']:.2f} "
        f"({_fmt(report['baseline_detection_total'])} -> {_fmt(report['rsa_detection_total'])})"
    )
    return "\n".join(lines)
