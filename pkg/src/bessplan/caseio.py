"""Grid case files.

Two on-disk layouts are read: a sectioned text format carrying the raw
bus / branch / generator / site tables in physical units, and the common
matrix-based case layout (bus, branch, gen blocks with standard column
meanings). Both land in a validated per-unit NetworkModel.
"""
import math
import re

import numpy as np

from .network import (NetworkError, NetworkModel, Bus, Branch, Generator,
                      RawBranch, RawBus, RawGenerator, RawNetwork, RawSite,
                      from_per_unit, to_per_unit)


class CaseError(ValueError):
    pass


# field order of each section, matching the raw-table dataclasses
_SECTIONS = {
    "case": ("base_mva",),
    "bus": ("id", "kind", "g_shunt_mw", "b_shunt_mvar",
            "v_min_kv", "v_max_kv", "base_kv"),
    "branch": ("id", "from_bus", "to_bus", "r_ohm", "x_ohm",
               "theta_max", "i_max_ka"),
    "generator": ("id", "bus", "p_min_mw", "p_max_mw", "q_min_mvar",
                  "q_max_mvar", "v_set", "is_condenser"),
    "site": ("id", "bus", "w_min_mw", "w_max_mw", "c_min_mwh", "c_max_mwh",
             "c_rate", "ic_p_per_mw", "ic_e_per_mwh", "soe_min", "soe_max"),
}
_KINDS = ("slack", "pv", "pq")


def _parse_id(token):
    try:
        return int(token)
    except ValueError:
        return token


def _parse_float(token, path, lineno, field):
    try:
        value = float(token)
    except ValueError:
        raise CaseError("%s line %d: non-numeric value %r for %s"
                        % (path, lineno, token, field))
    if not math.isfinite(value):
        raise CaseError("%s line %d: non-finite value for %s"
                        % (path, lineno, field))
    return value


def read_case(path):
    """Parse a sectioned case file into a per-unit NetworkModel."""
    tables = {name: [] for name in _SECTIONS}
    section = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if text.startswith("[") and text.endswith("]"):
                section = text[1:-1].strip().lower()
                if section not in _SECTIONS:
                    raise CaseError("%s line %d: unknown section %r"
                                    % (path, lineno, section))
                continue
            if section is None:
                raise CaseError("%s line %d: data before any section header"
                                % (path, lineno))
            fields = _SECTIONS[section]
            tokens = text.replace(",", " ").split()
            if len(tokens) != len(fields):
                raise CaseError("%s line %d: [%s] row needs %d fields, got %d"
                                % (path, lineno, section, len(fields),
                                   len(tokens)))
            tables[section].append((lineno, tokens))

    if len(tables["case"]) != 1:
        raise CaseError("%s: expected exactly one [case] row with base_mva"
                        % path)
    lineno, tokens = tables["case"][0]
    base_mva = _parse_float(tokens[0], path, lineno, "base_mva")

    buses = []
    for lineno, t in tables["bus"]:
        if t[1] not in _KINDS:
            raise CaseError("%s line %d: bus kind must be one of %s, got %r"
                            % (path, lineno, "/".join(_KINDS), t[1]))
        buses.append(RawBus(
            _parse_id(t[0]), t[1],
            *(_parse_float(t[i], path, lineno, f)
              for i, f in enumerate(_SECTIONS["bus"][2:], start=2))))
    branches = [
        RawBranch(_parse_id(t[0]), _parse_id(t[1]), _parse_id(t[2]),
                  *(_parse_float(t[i], path, lineno, f)
                    for i, f in enumerate(_SECTIONS["branch"][3:], start=3)))
        for lineno, t in tables["branch"]]
    generators = [
        RawGenerator(_parse_id(t[0]), _parse_id(t[1]),
                     *(_parse_float(t[i], path, lineno, f)
                       for i, f in enumerate(_SECTIONS["generator"][2:-1],
                                             start=2)),
                     is_condenser=t[-1].lower() in ("1", "true", "yes"))
        for lineno, t in tables["generator"]]
    sites = [
        RawSite(_parse_id(t[0]), _parse_id(t[1]),
                *(_parse_float(t[i], path, lineno, f)
                  for i, f in enumerate(_SECTIONS["site"][2:], start=2)))
        for lineno, t in tables["site"]]

    raw = RawNetwork(tuple(buses), tuple(branches), tuple(generators),
                     tuple(sites))
    try:
        return to_per_unit(raw, base_mva)
    except NetworkError as exc:
        raise CaseError("%s: %s" % (path, exc)) from exc


def write_case(network, path):
    """Emit the sectioned layout; read_case round-trips within 1e-12."""
    raw = from_per_unit(network)
    lines = ["[case]", "%.17g" % network.base_mva, "", "[bus]"]
    for b in raw.buses:
        lines.append("%s %s %.17g %.17g %.17g %.17g %.17g"
                     % (b.id, b.kind, b.g_shunt_mw, b.b_shunt_mvar,
                        b.v_min_kv, b.v_max_kv, b.base_kv))
    lines += ["", "[branch]"]
    for l in raw.branches:
        lines.append("%s %s %s %.17g %.17g %.17g %.17g"
                     % (l.id, l.from_bus, l.to_bus, l.r_ohm, l.x_ohm,
                        l.theta_max, l.i_max_ka))
    lines += ["", "[generator]"]
    for g in raw.generators:
        lines.append("%s %s %.17g %.17g %.17g %.17g %.17g %d"
                     % (g.id, g.bus, g.p_min_mw, g.p_max_mw, g.q_min_mvar,
                        g.q_max_mvar, g.v_set, int(g.is_condenser)))
    lines += ["", "[site]"]
    for s in raw.candidate_sites:
        lines.append("%s %s %.17g %.17g %.17g %.17g %.17g %.17g %.17g %.17g %.17g"
                     % (s.id, s.bus, s.w_min_mw, s.w_max_mw, s.c_min_mwh,
                        s.c_max_mwh, s.c_rate, s.ic_p_per_mw, s.ic_e_per_mwh,
                        s.soe_min, s.soe_max))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# matrix case layout

_MATRIX_KINDS = {1: "pq", 2: "pv", 3: "slack"}


def _matrix_block(text, name, path):
    match = re.search(r"mpc\.%s\s*=\s*\[(.*?)\];" % name, text, re.DOTALL)
    if match is None:
        raise CaseError("%s: missing mpc.%s block" % (path, name))
    rows = []
    for row in match.group(1).split(";"):
        row = row.split("%", 1)[0].strip()
        if not row:
            continue
        try:
            rows.append([float(tok) for tok in row.replace(",", " ").split()])
        except ValueError:
            raise CaseError("%s: non-numeric entry in mpc.%s row %r"
                            % (path, name, row))
    return rows


def read_matrix_case(path, default_theta_max=math.pi / 3):
    """Convert a matrix-layout case into (NetworkModel, snapshot_p, snapshot_q).

    The static bus loads become the per-unit snapshot used for reactive
    reconstruction. Branch MVA ratings map to per-unit current ampacity at
    nominal voltage; a zero rating means unlimited and keeps the model
    default. Angle-difference limits outside (0, 90) degrees fall back to
    default_theta_max. Out-of-service rows are dropped.
    """
    with open(path) as fh:
        text = fh.read()
    match = re.search(r"mpc\.baseMVA\s*=\s*([0-9.eE+-]+)\s*;", text)
    if match is None:
        raise CaseError("%s: missing mpc.baseMVA" % path)
    base = float(match.group(1))

    buses, p_snap, q_snap = [], [], []
    for row in _matrix_block(text, "bus", path):
        if len(row) < 13:
            raise CaseError("%s: bus row needs 13 columns, got %d"
                            % (path, len(row)))
        kind = _MATRIX_KINDS.get(int(row[1]))
        if kind is None:
            raise CaseError("%s: bus %d has unsupported type %d"
                            % (path, int(row[0]), int(row[1])))
        base_kv = row[9] if row[9] > 0 else 1.0
        buses.append(Bus(int(row[0]), kind,
                         g_shunt=row[4] / base, b_shunt=row[5] / base,
                         v_min=row[12] ** 2, v_max=row[11] ** 2,
                         base_kv=base_kv))
        p_snap.append(row[2] / base)
        q_snap.append(row[3] / base)

    branches = []
    for k, row in enumerate(_matrix_block(text, "branch", path)):
        if len(row) < 13:
            raise CaseError("%s: branch row needs 13 columns, got %d"
                            % (path, len(row)))
        if row[10] == 0:          # out of service
            continue
        theta_max = math.radians(max(abs(row[11]), abs(row[12])))
        if not 0 < theta_max < math.pi / 2:
            theta_max = default_theta_max
        i_max = row[5] / base if row[5] > 0 else Branch.i_max
        branches.append(Branch("l%d" % (k + 1), int(row[0]), int(row[1]),
                               r=row[2], x=row[3], theta_max=theta_max,
                               i_max=i_max))

    generators = []
    for k, row in enumerate(_matrix_block(text, "gen", path)):
        if len(row) < 10:
            raise CaseError("%s: gen row needs 10 columns, got %d"
                            % (path, len(row)))
        if row[7] <= 0:           # out of service
            continue
        p_min, p_max = row[9] / base, row[8] / base
        generators.append(Generator(
            "g%d" % (k + 1), int(row[0]),
            p_min=p_min, p_max=p_max,
            q_min=row[4] / base, q_max=row[3] / base,
            v_set=row[5] if row[5] > 0 else 1.0,
            is_condenser=p_min == 0.0 and p_max == 0.0))

    try:
        network = NetworkModel(buses, branches, generators, base_mva=base)
    except NetworkError as exc:
        raise CaseError("%s: %s" % (path, exc)) from exc
    return network, np.array(p_snap), np.array(q_snap)
