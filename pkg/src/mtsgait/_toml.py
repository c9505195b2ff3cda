"""Minimal TOML emitter for config echoes and checkpoint-embedded configs.

Supports the subset the run configs use: string/int/float/bool scalars,
inline arrays of scalars, nested tables, and arrays of tables. Parsing
is delegated to tomllib/tomli.
"""

from __future__ import annotations

from fractions import Fraction

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib


def loads(text: str) -> dict:
    return tomllib.loads(text)


def _fmt_scalar(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, Fraction):
        return _fmt_scalar(str(v))
    if isinstance(v, str):
        escaped = v.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    raise TypeError(f"cannot render {type(v).__name__} as TOML scalar")


def _is_table_array(v) -> bool:
    return isinstance(v, list) and bool(v) and all(isinstance(e, dict) for e in v)


def _emit_table(out: list[str], table: dict, path: str) -> None:
    scalars = {k: v for k, v in table.items()
               if not isinstance(v, dict) and not _is_table_array(v)}
    subtables = {k: v for k, v in table.items() if isinstance(v, dict)}
    table_arrays = {k: v for k, v in table.items() if _is_table_array(v)}

    if path and (scalars or not (subtables or table_arrays)):
        out.append(f"[{path}]")
    for k, v in scalars.items():
        if isinstance(v, list):
            body = ", ".join(_fmt_scalar(e) for e in v)
            out.append(f"{k} = [{body}]")
        else:
            out.append(f"{k} = {_fmt_scalar(v)}")
    if scalars and (subtables or table_arrays):
        out.append("")
    for k, v in subtables.items():
        sub = f"{path}.{k}" if path else k
        _emit_table(out, v, sub)
        out.append("")
    for k, entries in table_arrays.items():
        sub = f"{path}.{k}" if path else k
        for entry in entries:
            out.append(f"[[{sub}]]")
            for ek, ev in entry.items():
                if isinstance(ev, list):
                    body = ", ".join(_fmt_scalar(e) for e in ev)
                    out.append(f"{ek} = [{body}]")
                else:
                    out.append(f"{ek} = {_fmt_scalar(ev)}")
            out.append("")
    while out and out[-1] == "":
        out.pop()


def dumps(obj: dict) -> str:
    out: list[str] = []
    _emit_table(out, obj, "")
    return "\n".join(out) + "\n"
