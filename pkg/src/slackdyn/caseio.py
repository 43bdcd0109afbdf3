"""JSON case files.

A case bundles the network, power-flow dispatch, dynamic devices and named
scenarios. Validation is strict: unknown fields are errors and every error
message names its location in the file.
"""

from __future__ import annotations

import json
import math
from importlib import resources
from pathlib import Path
from typing import Annotated, Literal, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from pydantic import ValidationError as PydanticValidationError

from . import devices as dv
from .dynsim import DisconnectDevice, DynamicSystem, Event, Perturbation, ScaleLoad, Scenario, SetParam
from .errors import ConfigurationError, ParseError, ValidationError
from .netcore import Branch, Bus, Network
from .powerflow import Generator, SlackSpec, equal_participation


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class Meta(_Strict):
    name: str
    s_base: float = Field(100.0, gt=0)
    f_nominal: float = Field(60.0, gt=0)
    notes: Union[str, list[str]] = ""


class BusModel(_Strict):
    id: int
    v: float = Field(1.0, gt=0)
    theta: float = 0.0
    base_kv: float = Field(1.0, gt=0)


class BranchModel(_Strict):
    from_bus: int
    to_bus: int
    r: float = 0.0
    x: float = 0.0
    b: float = 0.0
    tap: float = Field(1.0, gt=0)


class PQLoadModel(_Strict):
    type: Literal["pq", "z"]
    name: str
    bus: int
    p: float
    q: float = 0.0


class RlcLoadModel(_Strict):
    type: Literal["rlc"]
    name: str
    bus: int
    r: float = Field(ge=0)
    x_l: float = Field(gt=0, description="series inductive reactance at nominal frequency, pu")
    b_c: float = Field(gt=0, description="capacitive susceptance at nominal frequency, pu")


LoadModel = Annotated[Union[PQLoadModel, RlcLoadModel], Field(discriminator="type")]


class GeneratorModel(_Strict):
    bus: int
    p: float = 0.0
    q: float = 0.0
    v: float | None = Field(None, gt=0)
    name: str = ""


class SlackModel(_Strict):
    mode: Literal["single", "distributed", "dynamic"] = "single"
    reference_bus: int | None = None
    theta_ref: float = 0.0
    participation: Union[Literal["equal"], dict[int, float], None] = None
    droop: tuple[float, float, float] = (1.0, 0.0, 1.0)
    allow_negative: bool = False


class GovernorModel(_Strict):
    R: float = Field(gt=0)
    T: float = Field(gt=0)
    mode: Literal["droop", "integral"] = "droop"
    agc_share: float | Literal["auto"] = 0.0


class MachineModel(_Strict):
    type: Literal["machine"]
    name: str
    bus: int
    M: float = Field(gt=0)
    D: float = Field(ge=0)
    xd_prime: float = Field(gt=0)
    governor: GovernorModel | None = None


class AgcModel(_Strict):
    type: Literal["agc"]
    name: str
    K_o: float = Field(gt=0)
    xi0: float = 0.0


class GfmModel(_Strict):
    type: Literal["gfm"]
    name: str
    bus: int
    variant: Literal["droop", "vsm"] = "droop"
    D_alpha: float = Field(gt=0)
    H_alpha: float = Field(0.0, ge=0)
    M_alpha: float = Field(0.0, ge=0)
    r_f: float = Field(0.0, ge=0)
    x_f: float = Field(0.1, gt=0)


class GflModel(_Strict):
    type: Literal["gfl"]
    name: str
    bus: int
    kp_pll: float | None = None
    ki_pll: float | None = None
    r_f: float | None = None
    x_f: float | None = Field(None, gt=0, description="filter reactance at nominal frequency, pu")
    b_f: float | None = Field(None, gt=0, description="filter susceptance at nominal frequency, pu")
    g_dc: float | None = None
    c_dc: float | None = None
    T_dc: float | None = None
    R_dc: float | None = None
    T_i: float | None = None
    T_v: float | None = None
    K_dc: float | None = None
    v_dc_ref: float | None = None
    dc_source: bool = True


class IdealSlackModel(_Strict):
    type: Literal["ideal_slack"]
    name: str
    bus: int
    mode: Literal["integrator", "droop"] = "integrator"
    K: float = 1.0
    H: float = 0.0
    T: float = 1.0
    theta_ref: float | None = None
    p0: float = 0.0


DeviceModel = Annotated[
    Union[MachineModel, AgcModel, GfmModel, GflModel, IdealSlackModel], Field(discriminator="type")
]


class ScaleLoadModel(_Strict):
    type: Literal["scale_load"]
    bus: int
    factor: float = Field(gt=0)


class SetParamModel(_Strict):
    type: Literal["set_param"]
    device: str
    field: str
    value: float


class DisconnectModel(_Strict):
    type: Literal["disconnect"]
    device: str


ActionModel = Annotated[Union[ScaleLoadModel, SetParamModel, DisconnectModel], Field(discriminator="type")]


class EventModel(_Strict):
    t: float = Field(ge=0)
    action: ActionModel


class PerturbationModel(_Strict):
    device: str
    state: str
    delta: float


class ScenarioModel(_Strict):
    t_end: float = Field(gt=0)
    dt: float = Field(0.01, gt=0)
    label: str = ""
    events: list[EventModel] = []
    perturbations: list[PerturbationModel] = []

    @model_validator(mode="after")
    def _events_inside(self):
        for k, ev in enumerate(self.events):
            if ev.t >= self.t_end:
                raise ValueError(f"events[{k}] at t={ev.t} is not before t_end={self.t_end}")
        return self


class CaseDefinition(_Strict):
    format_version: Literal[1]
    meta: Meta
    buses: list[BusModel] = Field(min_length=1)
    branches: list[BranchModel] = []
    loads: list[LoadModel] = []
    generators: list[GeneratorModel] = []
    slack: SlackModel = SlackModel()
    devices: list[DeviceModel] = []
    scenarios: dict[str, ScenarioModel] = {}

    @field_validator("buses")
    @classmethod
    def _unique_buses(cls, v):
        ids = [b.id for b in v]
        if len(set(ids)) != len(ids):
            raise ValueError("bus ids must be unique")
        return v

    @model_validator(mode="after")
    def _cross_references(self):
        ids = {b.id for b in self.buses}

        def bus(where, b):
            if b not in ids:
                raise ValueError(f"{where}: unknown bus {b}")

        for k, br in enumerate(self.branches):
            bus(f"branches[{k}].from_bus", br.from_bus)
            bus(f"branches[{k}].to_bus", br.to_bus)
        names = []
        for k, ld in enumerate(self.loads):
            bus(f"loads[{k}].bus", ld.bus)
            names.append(ld.name)
        for k, g in enumerate(self.generators):
            bus(f"generators[{k}].bus", g.bus)
        integral = []
        for k, d in enumerate(self.devices):
            if hasattr(d, "bus"):
                bus(f"devices[{k}].bus", d.bus)
            names.append(d.name)
            if isinstance(d, MachineModel) and d.governor and d.governor.mode == "integral":
                integral.append(d.name)
        if len(set(names)) != len(names):
            raise ValueError("device and load names must be unique")
        if len(integral) > 1:
            raise ValueError(
                f"devices {integral} all have integral governors; at most one turbine governor "
                "may be integral, otherwise the generator injections are undetermined"
            )
        sl = self.slack
        if sl.reference_bus is not None:
            bus("slack.reference_bus", sl.reference_bus)
        if isinstance(sl.participation, dict):
            for b in sl.participation:
                bus("slack.participation", b)
        known = set(names)
        for sname, sc in self.scenarios.items():
            for k, ev in enumerate(sc.events):
                a = ev.action
                where = f"scenarios.{sname}.events[{k}]"
                if isinstance(a, ScaleLoadModel):
                    bus(where, a.bus)
                    if not any(ld.bus == a.bus for ld in self.loads):
                        raise ValueError(f"{where}: no load at bus {a.bus}")
                elif a.device not in known:
                    raise ValueError(f"{where}: unknown device {a.device!r}")
            for k, pb in enumerate(sc.perturbations):
                if pb.device not in known:
                    raise ValueError(f"scenarios.{sname}.perturbations[{k}]: unknown device {pb.device!r}")
        return self


# ---------------------------------------------------------------------------
# parsing


def _format_loc(loc) -> str:
    out = ""
    for part in loc:
        if isinstance(part, int):
            out += f"[{part}]"
        else:
            out += ("." if out else "") + str(part)
    return out or "<root>"


def parse_case_text(text: str, source: str = "<string>") -> CaseDefinition:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{source}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    try:
        return CaseDefinition.model_validate(raw)
    except PydanticValidationError as exc:
        msgs = []
        for err in exc.errors():
            loc = _format_loc(err["loc"])
            msgs.append(f"{loc}: {err['msg']}")
        raise ValidationError(f"{source}: " + "; ".join(msgs)) from exc


def parse_case(path) -> CaseDefinition:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise ParseError(f"{path}: file not found") from exc
    except UnicodeDecodeError as exc:
        raise ParseError(f"{path}: not valid UTF-8 ({exc})") from exc
    return parse_case_text(text, str(path))


def bundled_cases() -> list[str]:
    root = resources.files("slackdyn") / "cases"
    return sorted(p.name for p in root.iterdir() if p.name.endswith(".json"))


def bundled_case_path(name: str) -> Path:
    if not name.endswith(".json"):
        name += ".json"
    p = resources.files("slackdyn") / "cases" / name
    if not p.is_file():
        raise ParseError(f"no bundled case named {name}")
    return Path(str(p))


def resolve_case_path(ref) -> Path:
    """A filesystem path, or the name of a bundled case."""
    p = Path(ref)
    if p.exists():
        return p
    return bundled_case_path(str(ref))


# ---------------------------------------------------------------------------
# building model objects


def build_network(case: CaseDefinition) -> Network:
    buses = tuple(Bus(b.id, b.v, b.theta, b.base_kv) for b in case.buses)
    branches = tuple(Branch(br.from_bus, br.to_bus, br.r, br.x, br.b, br.tap) for br in case.branches)
    return Network(buses, branches, s_base=case.meta.s_base, f_nominal=case.meta.f_nominal)


def build_slack(case: CaseDefinition, mode=None, participation=None) -> SlackSpec:
    sl = case.slack
    mode = mode or sl.mode
    part = sl.participation if participation is None else participation
    gens = tuple(Generator(g.bus, g.p, g.q, g.v, g.name) for g in case.generators)
    if part == "equal" or (mode == "distributed" and part is None):
        from .powerflow import Injections

        part = equal_participation(Injections(generators=gens))
    ref = sl.reference_bus
    if ref is None:
        ref = next((g.bus for g in case.generators if g.v is not None), case.buses[0].id)
    return SlackSpec(
        mode=mode,
        reference_bus=ref,
        theta_ref=sl.theta_ref,
        participation=dict(part) if isinstance(part, dict) else None,
        droop=tuple(sl.droop),
        allow_negative=sl.allow_negative,
    )


def build_devices(case: CaseDefinition, omega_b: float) -> list:
    out = []
    for ld in case.loads:
        if isinstance(ld, RlcLoadModel):
            out.append(dv.RlcLoad(ld.name, ld.bus, dv.RlcLoadParams(ld.r, ld.x_l / omega_b, ld.b_c / omega_b), omega_b))
        else:
            out.append(dv.StaticLoad(ld.name, ld.bus, ld.p, ld.q, model=ld.type))
    machine_droops = {}
    for d in case.devices:
        if isinstance(d, MachineModel) and d.governor and d.governor.mode == "droop":
            machine_droops[d.name] = d.governor.R
    auto_shares = {}
    if machine_droops:
        shares = dv.conventional_agc_shares(list(machine_droops.values()))
        auto_shares = dict(zip(machine_droops, shares))
    for d in case.devices:
        if isinstance(d, MachineModel):
            gov = None
            if d.governor:
                share = d.governor.agc_share
                if share == "auto":
                    share = auto_shares.get(d.name, 0.0)
                gov = dv.GovernorParams(R=d.governor.R, T=d.governor.T, mode=d.governor.mode, agc_share=share)
            out.append(dv.SyncMachine(d.name, d.bus, d.M, d.D, d.xd_prime, governor=gov, omega_b=omega_b))
        elif isinstance(d, AgcModel):
            out.append(dv.Agc(d.name, dv.AgcParams(K_o=d.K_o, xi0=d.xi0)))
        elif isinstance(d, GfmModel):
            p = dv.GfmParams(d.variant, d.D_alpha, d.H_alpha, d.M_alpha, 0.0, d.r_f, d.x_f)
            out.append(dv.Gfm(d.name, d.bus, p, omega_b))
        elif isinstance(d, GflModel):
            kw = {
                k: v
                for k, v in d.model_dump().items()
                if k not in ("type", "name", "bus", "x_f", "b_f") and v is not None
            }
            if d.x_f is not None:
                kw["l_f"] = d.x_f / omega_b
            if d.b_f is not None:
                kw["c_f"] = d.b_f / omega_b
            out.append(dv.Gfl(d.name, d.bus, dv.GflParams(**kw), omega_b))
        elif isinstance(d, IdealSlackModel):
            out.append(dv.IdealSlack(d.name, d.bus, d.mode, d.K, d.H, d.T, d.theta_ref, d.p0))
    return out


def build_system(case: CaseDefinition) -> DynamicSystem:
    try:
        net = build_network(case)
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc
    try:
        devs = build_devices(case, net.omega_b)
    except ConfigurationError as exc:
        raise ValidationError(str(exc)) from exc
    gens = tuple(Generator(g.bus, g.p, g.q, g.v, g.name) for g in case.generators)
    return DynamicSystem(net, devs, gens, build_slack(case), name=case.meta.name)


def build_scenario(case: CaseDefinition, name: str, t_end=None, dt=None) -> Scenario:
    if name not in case.scenarios:
        raise ValidationError(f"case {case.meta.name!r} has no scenario {name!r}; available: {sorted(case.scenarios)}")
    sc = case.scenarios[name]
    events = []
    for ev in sc.events:
        a = ev.action
        if isinstance(a, ScaleLoadModel):
            action = ScaleLoad(a.bus, a.factor)
        elif isinstance(a, SetParamModel):
            action = SetParam(a.device, a.field, a.value)
        else:
            action = DisconnectDevice(a.device)
        events.append(Event(ev.t, action))
    perts = tuple(Perturbation(p.device, p.state, p.delta) for p in sc.perturbations)
    t_end = sc.t_end if t_end is None else t_end
    dt = sc.dt if dt is None else dt
    if not (t_end > 0 and dt > 0 and math.isfinite(t_end) and math.isfinite(dt)):
        raise ValidationError("t_end and dt must be positive")
    try:
        return Scenario(name, t_end, dt, tuple(events), perts, sc.label)
    except ConfigurationError as exc:
        raise ValidationError(str(exc)) from exc


def load(ref) -> tuple[CaseDefinition, DynamicSystem]:
    case = parse_case(resolve_case_path(ref))
    return case, build_system(case)
