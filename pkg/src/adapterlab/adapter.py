"""Adapter design space: activation positions, output equivalence classes,
the ordering constraint, function forms, and zero-initialized injection into
a frozen backbone.

Naming convention: a position is named after its neighboring layer (CA_out is
the output of cross-attention, pre-residual; CA_c is the condition input of
cross-attention). Output positions that differ only by where an addition is
re-associated are merged into one equivalence class.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ConstraintError

ACTIVATIONS = ("relu", "sigmoid", "silu", "identity")
SCALES = (0.5, 1.0, 2.0, 4.0)

TRANSFORMER = "transformer"
RESIDUAL = "residual"


@dataclass(frozen=True)
class PositionId:
    name: str
    kind: str  # transformer | residual
    stage: int  # partial-order key within the sub-block


POSITIONS = (
    PositionId("SA_in", TRANSFORMER, 0),
    PositionId("SA_out", TRANSFORMER, 1),
    PositionId("CA_in", TRANSFORMER, 1),
    PositionId("CA_c", TRANSFORMER, 1),
    PositionId("CA_out", TRANSFORMER, 2),
    PositionId("FFN_in", TRANSFORMER, 2),
    PositionId("FFN_out", TRANSFORMER, 3),
    PositionId("Trans_out", TRANSFORMER, 3),
    PositionId("Res_in", RESIDUAL, 0),
    PositionId("Res_out", RESIDUAL, 1),
)

POSITION_BY_NAME = {p.name: p for p in POSITIONS}


@dataclass(frozen=True)
class OutputClass:
    """Set of physical write sites made interchangeable by commutative addition."""

    members: tuple[str, ...]

    @property
    def label(self) -> str:
        return "/".join(self.members)

    @property
    def kind(self) -> str:
        return POSITION_BY_NAME[self.members[0]].kind

    @property
    def stage(self) -> int:
        return POSITION_BY_NAME[self.members[0]].stage

    @property
    def canonical_site(self) -> str:
        # the post-merge member (last in data-path order) always has its
        # input available by write time, so it is the default physical site
        return self.members[-1]

    def __contains__(self, name: str) -> bool:
        return name in self.members


OUTPUT_CLASSES = (
    OutputClass(("SA_in",)),
    OutputClass(("SA_out", "CA_in")),
    OutputClass(("CA_c",)),
    OutputClass(("CA_out", "FFN_in")),
    OutputClass(("FFN_out", "Trans_out")),
    OutputClass(("Res_in",)),
    OutputClass(("Res_out",)),
)

_CLASS_BY_MEMBER = {name: oc for oc in OUTPUT_CLASSES for name in oc.members}


def output_class_of(position_name: str) -> OutputClass:
    return _CLASS_BY_MEMBER[position_name]


def parse_output_class(text: str) -> OutputClass:
    """Accept any member subset in any order, e.g. 'FFN_in/CA_out' or 'FFN_in'."""
    names = text.split("/")
    classes = set()
    for n in names:
        if n not in _CLASS_BY_MEMBER:
            raise ConstraintError(f"unknown output position {n!r}")
        classes.add(_CLASS_BY_MEMBER[n])
    if len(classes) != 1:
        raise ConstraintError(f"positions in {text!r} belong to different output classes")
    return classes.pop()


@dataclass(frozen=True)
class DesignPoint:
    """One adapter configuration: the atomic unit of the sweep."""

    input_pos: str
    output_class: OutputClass
    activation: str
    scale: float
    rank: int | None = None  # None until resolved (by budget or config)
    blocks: tuple[str, ...] | None = None  # None = all blocks of matching kind

    @property
    def kind(self) -> str:
        return POSITION_BY_NAME[self.input_pos].kind

    def to_string(self) -> str:
        s = self.scale
        s_txt = str(int(s)) if float(s).is_integer() else repr(float(s))
        r_txt = "auto" if self.rank is None else str(self.rank)
        return f"in={self.input_pos},out={self.output_class.label},act={self.activation},s={s_txt},r={r_txt}"

    @staticmethod
    def from_string(text: str) -> "DesignPoint":
        fields = {}
        for part in text.split(","):
            key, _, val = part.partition("=")
            fields[key.strip()] = val.strip()
        missing = {"in", "out", "act", "s", "r"} - set(fields)
        if missing:
            raise ConstraintError(f"design string {text!r} is missing {sorted(missing)}")
        if fields["in"] not in POSITION_BY_NAME:
            raise ConstraintError(f"unknown input position {fields['in']!r}")
        dp = DesignPoint(
            input_pos=fields["in"],
            output_class=parse_output_class(fields["out"]),
            activation=fields["act"],
            scale=float(fields["s"]),
            rank=None if fields["r"] == "auto" else int(fields["r"]),
        )
        validate_design_point(dp)
        return dp


def validate_design_point(dp: DesignPoint) -> None:
    """Raise ConstraintError naming the violated rule, if any."""
    pos = POSITION_BY_NAME.get(dp.input_pos)
    if pos is None:
        raise ConstraintError(f"unknown input position {dp.input_pos!r}")
    if dp.output_class not in OUTPUT_CLASSES:
        raise ConstraintError(f"unknown output class {dp.output_class}")
    if pos.kind != dp.output_class.kind:
        raise ConstraintError(
            f"input {dp.input_pos} ({pos.kind}) and output {dp.output_class.label} "
            f"({dp.output_class.kind}) must belong to the same sub-block kind"
        )
    if dp.output_class.stage < pos.stage:
        raise ConstraintError(
            f"output {dp.output_class.label} (stage {dp.output_class.stage}) must be placed "
            f"at or after input {dp.input_pos} (stage {pos.stage})"
        )
    if dp.activation not in ACTIVATIONS:
        raise ConstraintError(f"unknown activation {dp.activation!r}")
    if dp.scale <= 0:
        raise ConstraintError(f"scale must be positive, got {dp.scale}")
    if dp.rank is not None and dp.rank < 1:
        raise ConstraintError(f"rank must be >= 1, got {dp.rank}")


def valid_position_pairs() -> list[tuple[str, OutputClass]]:
    """All (input position, output class) pairs allowed by the two constraints."""
    pairs = []
    for pos in POSITIONS:
        for oc in OUTPUT_CLASSES:
            if oc.kind == pos.kind and oc.stage >= pos.stage:
                pairs.append((pos.name, oc))
    return pairs


def nearest_output_class(input_pos: str) -> OutputClass:
    """The earliest legal output class for an input; prefers the class
    containing the input position when stages tie."""
    pos = POSITION_BY_NAME[input_pos]
    candidates = [oc for oc in OUTPUT_CLASSES if oc.kind == pos.kind and oc.stage >= pos.stage]
    best_stage = min(oc.stage for oc in candidates)
    at_best = [oc for oc in candidates if oc.stage == best_stage]
    for oc in at_best:
        if input_pos in oc:
            return oc
    return at_best[0]


def enumerate_design_space(
    activations=ACTIVATIONS, scales=SCALES, rank: int | None = None
) -> list[DesignPoint]:
    """Every valid (input, output class, activation, scale) combination, in
    deterministic order."""
    if not activations or not scales:
        raise ConfigurationError("activation and scale option sets must be nonempty")
    points = []
    for pos_name, oc in valid_position_pairs():
        for act in activations:
            for s in scales:
                dp = DesignPoint(pos_name, oc, act, float(s), rank)
                points.append(dp)
    return points


# --- function forms -----------------------------------------------------------


def transformer_adapter_apply(x_in: T.Tensor, entry: dict, activation: str, scale: float) -> T.Tensor:
    """s * (act(x W_down) W_up) for token inputs (n, d)."""
    if x_in.shape[1] != entry["w_down"].shape[0]:
        raise ConfigurationError(
            f"adapter input dim {x_in.shape[1]} != W_down rows {entry['w_down'].shape[0]}"
        )
    h = T.activation(T.matmul(x_in, entry["w_down"]), activation)
    return T.mul(T.matmul(h, entry["w_up"]), scale)


def residual_adapter_apply(x_in: T.Tensor, entry: dict, activation: str, scale: float) -> T.Tensor:
    """s * Conv_up(act(Conv_down(GN(x_in)))) for spatial inputs (C, H, W)."""
    if x_in.shape[0] != entry["down_w"].shape[1]:
        raise ConfigurationError(
            f"adapter input channels {x_in.shape[0]} != Conv_down channels {entry['down_w'].shape[1]}"
        )
    h = T.group_norm(x_in, entry["groups"], entry["gn_gamma"], entry["gn_beta"])
    h = T.activation(T.conv2d(h, entry["down_w"], entry["down_b"]), activation)
    return T.mul(T.conv2d(h, entry["up_w"], entry["up_b"]), scale)


# --- the bank -----------------------------------------------------------------


DOWN_INIT_STD = 0.02  # up-projections start at zero so injection is a no-op


@dataclass
class AdapterBank:
    """Per-block adapter parameter groups injected into a frozen model."""

    design: DesignPoint
    write_site: str
    entries: dict  # block name -> dict of param/aux values
    _captured: dict = field(default_factory=dict, repr=False)

    def parameters(self):
        out = []
        for block in sorted(self.entries):
            entry = self.entries[block]
            for key in sorted(entry):
                if isinstance(entry[key], T.Tensor) and entry[key].requires_grad:
                    out.append((f"{block}.{key}", entry[key]))
        return out

    def num_params(self) -> int:
        return sum(p.size for _, p in self.parameters())

    def zero_grads(self) -> None:
        for _, p in self.parameters():
            p.zero_grad()

    # hook protocol, called by the model at position materialization / write points

    def begin_forward(self) -> None:
        self._captured.clear()

    def tap(self, block: str, pos: str, value: T.Tensor) -> T.Tensor:
        entry = self.entries.get(block)
        if entry is None:
            return value
        if pos == self.design.input_pos:
            self._captured[block] = value
        if pos == self.write_site and pos != "CA_c":
            value = self._apply_write(block, value)
        return value

    def tap_read(self, block: str, pos: str, value: T.Tensor) -> T.Tensor:
        if pos == self.design.input_pos and block in self.entries:
            self._captured[block] = value
        return value

    def write_point(self, block: str, pos: str, value: T.Tensor) -> T.Tensor:
        if pos == self.write_site and block in self.entries:
            value = self._apply_write(block, value)
        return value

    def _apply_write(self, block: str, target: T.Tensor) -> T.Tensor:
        if block not in self._captured:
            raise ConstraintError(
                f"write site {self.write_site} materializes before input "
                f"{self.design.input_pos} was read in block {block}"
            )
        x_in = self._captured.pop(block)
        entry = self.entries[block]
        dp = self.design
        if dp.kind == TRANSFORMER:
            # condition rows and token rows disagree in count; pool/broadcast
            # bridges the two row spaces
            cross = (dp.input_pos == "CA_c") != (self.write_site == "CA_c")
            if cross:
                x_in = T.mean_rows(x_in)
            a = transformer_adapter_apply(x_in, entry, dp.activation, dp.scale)
            if cross:
                a = T.broadcast_rows(a, target.shape[0])
        else:
            a = residual_adapter_apply(x_in, entry, dp.activation, dp.scale)
        return T.add(target, a)


def _adapter_groups(channels: int, preferred: int) -> int:
    return math.gcd(channels, preferred)


def build_bank(model, design: DesignPoint, seed: int, write_site: str | None = None) -> AdapterBank:
    """Instantiate per-block adapter parameters for a validated design point.

    Down-projections are seeded Gaussian (std 0.02); up-projections start at
    zero so the injected model reproduces the frozen baseline exactly.
    """
    validate_design_point(design)
    if design.rank is None:
        raise ConstraintError("design point rank is unresolved; set it or solve from a budget")
    if write_site is None:
        write_site = design.output_class.canonical_site
    elif write_site not in design.output_class:
        raise ConstraintError(
            f"write site {write_site} is not a member of class {design.output_class.label}"
        )
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, 0x0ADA]))
    entries = {}
    if design.kind == TRANSFORMER:
        for name, d_x in model.transformer_block_dims():
            if design.blocks is not None and name not in design.blocks:
                continue
            d_in = model.config.cond_dim if design.input_pos == "CA_c" else d_x
            d_out = model.config.cond_dim if write_site == "CA_c" else d_x
            if design.rank > min(d_in, d_out):
                raise ConfigurationError(
                    f"rank {design.rank} exceeds feature dim {min(d_in, d_out)} at block {name}"
                )
            entries[name] = {
                "w_down": T.Tensor(
                    rng.normal(0.0, DOWN_INIT_STD, (d_in, design.rank)), requires_grad=True
                ),
                "w_up": T.Tensor(np.zeros((design.rank, d_out)), requires_grad=True),
            }
    else:
        for name, c_in, c_out in model.residual_block_dims():
            if design.blocks is not None and name not in design.blocks:
                continue
            site_in = c_in if design.input_pos == "Res_in" else c_out
            site_out = c_in if write_site == "Res_in" else c_out
            mid = design.rank
            entries[name] = {
                "groups": _adapter_groups(site_in, model.config.norm_groups),
                "gn_gamma": T.Tensor(np.ones(site_in), requires_grad=True),
                "gn_beta": T.Tensor(np.zeros(site_in), requires_grad=True),
                "down_w": T.Tensor(
                    rng.normal(0.0, DOWN_INIT_STD, (mid, site_in, 3, 3)), requires_grad=True
                ),
                "down_b": T.Tensor(np.zeros(mid), requires_grad=True),
                "up_w": T.Tensor(np.zeros((site_out, mid, 3, 3)), requires_grad=True),
                "up_b": T.Tensor(np.zeros(site_out), requires_grad=True),
            }
    if not entries:
        raise ConstraintError(f"design point targets no blocks of kind {design.kind}")
    return AdapterBank(design=design, write_site=write_site, entries=entries)


def inject(model, design: DesignPoint, seed: int, write_site: str | None = None) -> AdapterBank:
    """Freeze the backbone and return the zero-initialized bank for this design."""
    bank = build_bank(model, design, seed, write_site)
    model.set_trainable(False)
    return bank


# --- accounting -----------------------------------------------------------------


def save_bank(bank: AdapterBank, path_prefix: str) -> None:
    """Write <prefix>.bin (ordered tensors) and <prefix>.json (design + layout)."""
    import json

    names = [name for name, _ in bank.parameters()]
    with open(f"{path_prefix}.bin", "wb") as fh:
        for name, p in bank.parameters():
            T.write_tensor(fh, p.data)
    manifest = {
        "design": bank.design.to_string(),
        "write_site": bank.write_site,
        "blocks": sorted(bank.entries),
        "tensors": names,
    }
    with open(f"{path_prefix}.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def load_bank(model, path_prefix: str) -> AdapterBank:
    """Rebuild a bank against a model and restore its trained parameters."""
    import json

    with open(f"{path_prefix}.json") as fh:
        manifest = json.load(fh)
    design = DesignPoint.from_string(manifest["design"])
    bank = build_bank(model, design, seed=0, write_site=manifest["write_site"])
    params = dict(bank.parameters())
    with open(f"{path_prefix}.bin", "rb") as fh:
        for name in manifest["tensors"]:
            arr = T.read_tensor(fh)
            if params[name].shape != arr.shape:
                raise ConfigurationError(
                    f"bank tensor {name} has shape {arr.shape}, expected {params[name].shape}"
                )
            params[name].data = arr
    return bank


def count_parameters(model, bank: AdapterBank | None) -> dict:
    backbone = sum(p.size for _, p in model.named_parameters())
    adapter = bank.num_params() if bank is not None else 0
    return {"backbone": backbone, "adapter": adapter, "fraction": adapter / backbone}


def _adapter_cost(model, design: DesignPoint, rank: int) -> int:
    """Parameter count of a bank at the given rank, without building tensors."""
    total = 0
    if design.kind == TRANSFORMER:
        for name, d_x in model.transformer_block_dims():
            if design.blocks is not None and name not in design.blocks:
                continue
            d_in = model.config.cond_dim if design.input_pos == "CA_c" else d_x
            d_out = model.config.cond_dim if design.output_class.canonical_site == "CA_c" else d_x
            total += d_in * rank + rank * d_out
    else:
        for name, c_in, c_out in model.residual_block_dims():
            if design.blocks is not None and name not in design.blocks:
                continue
            site_in = c_in if design.input_pos == "Res_in" else c_out
            site_out = c_in if design.output_class.canonical_site == "Res_in" else c_out
            total += 2 * site_in + 9 * site_in * rank + rank + 9 * rank * site_out + site_out
    return total


def solve_rank_for_budget(model, design: DesignPoint, budget_fraction: float) -> int:
    """Largest rank whose adapter fraction stays within the budget."""
    if not 0.0 < budget_fraction < 1.0:
        raise ConfigurationError(f"budget fraction must be in (0, 1), got {budget_fraction}")
    backbone = sum(p.size for _, p in model.named_parameters())
    budget = budget_fraction * backbone
    if _adapter_cost(model, design, 1) > budget:
        raise ConfigurationError(
            f"budget {budget_fraction:.4%} cannot fit a rank-1 adapter "
            f"({_adapter_cost(model, design, 1)} params vs {budget:.0f} allowed)"
        )
    rank = 1
    while _adapter_cost(model, design, rank + 1) <= budget:
        rank += 1
    return rank


def resolve_rank(model, design: DesignPoint, budget_fraction: float) -> DesignPoint:
    """Fill in the rank from the budget if the design point left it open."""
    if design.rank is not None:
        return design
    return replace(design, rank=solve_rank_for_budget(model, design, budget_fraction))
