"""
Sectioned `key = value` run configuration.

    [federated]
    participation = 0.1   # inline comments start with # or ;
    lr_grid = 0.01, 0.1, 1.0

Values are handed to the pydantic models as strings (lists split on commas,
an empty value meaning "unset"), so type checking and defaults live in
`app.models.run_config`. Every error names the line it comes from.
"""

import logging
import typing
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

from pydantic import BaseModel, ValidationError

from app.exceptions import ConfigError
from app.models.run_config import RunConfig

logger = logging.getLogger(__name__)

RawConfig = Dict[str, Dict[str, Tuple[str, int]]]


def _strip_comment(line: str) -> str:
    for i, ch in enumerate(line):
        if ch in "#;" and (i == 0 or line[i - 1].isspace()):
            return line[:i]
    return line


def read_sections(text: str, path: Optional[str] = None) -> RawConfig:
    """Split config text into {section: {key: (value, line)}}."""
    sections: RawConfig = {}
    current: Optional[str] = None
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]") or len(line) < 3:
                raise ConfigError(f"malformed section header: {raw.strip()}", line_no, path)
            current = line[1:-1].strip()
            if current not in RunConfig.model_fields:
                raise ConfigError(f"unknown section [{current}]", line_no, path)
            if current in sections:
                raise ConfigError(f"duplicate section [{current}]", line_no, path)
            sections[current] = {}
            continue
        if "=" not in line:
            raise ConfigError(f"malformed line, expected key = value: {raw.strip()}", line_no, path)
        if current is None:
            raise ConfigError("key outside of any [section]", line_no, path)
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError("missing key before '='", line_no, path)
        if key in sections[current]:
            raise ConfigError(f"duplicate key {current}.{key}", line_no, path)
        sections[current][key] = (value, line_no)
    return sections


def _is_list(model: type, key: str) -> bool:
    field = model.model_fields.get(key)
    if field is None:
        return False
    annotation = field.annotation
    if typing.get_origin(annotation) is Union:
        annotation = next(a for a in typing.get_args(annotation) if a is not type(None))
    return typing.get_origin(annotation) in (list, tuple)


def _coerce(model: type, key: str, value: str):
    if value == "":
        return None
    if _is_list(model, key):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


def _line_of(error: dict, sections: RawConfig) -> Optional[int]:
    loc = error.get("loc", ())
    if len(loc) >= 2 and loc[0] in sections and loc[1] in sections[loc[0]]:
        return sections[loc[0]][loc[1]][1]
    if len(loc) >= 1 and loc[0] in sections and sections[loc[0]]:
        return min(line for _, line in sections[loc[0]].values())
    return None


def build_config(sections: RawConfig, path: Optional[str] = None) -> RunConfig:
    """Validate parsed sections into a RunConfig."""
    data: Dict[str, Dict[str, object]] = {}
    for name, entries in sections.items():
        model = RunConfig.model_fields[name].annotation
        data[name] = {}
        for key, (value, _) in entries.items():
            coerced = _coerce(model, key, value)
            if coerced is not None:
                data[name][key] = coerced
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(part) for part in first["loc"]) or "config"
        raise ConfigError(f"{where}: {first['msg']}", _line_of(first, sections), path) from e


def parse_config(path: Union[str, Path]) -> RunConfig:
    """
    Read and validate a run configuration file.

    Raises:
        ConfigError: On an unreadable file, malformed line, unknown section or
            key, or a value the models reject; the message names the line.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        logger.error(f"Could not read config {path}: {e}")
        raise ConfigError(f"cannot read config: {e}", path=str(path)) from e
    cfg = build_config(read_sections(text, str(path)), str(path))
    logger.info(f"Loaded run config from {path} (task {cfg.run.task}, seed {cfg.run.seed})")
    return cfg


def apply_overrides(cfg: RunConfig, seed: Optional[int] = None, out_dir: Optional[str] = None) -> RunConfig:
    """Command-line --seed / --out take precedence over the file."""
    run_updates: Dict[str, object] = {}
    if seed is not None:
        if seed < 0:
            raise ConfigError("--seed must be >= 0")
        run_updates["seed"] = seed
    if out_dir is not None:
        run_updates["out_dir"] = out_dir
    if not run_updates:
        return cfg
    return cfg.model_copy(update={"run": cfg.run.model_copy(update=run_updates)})


def _format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ", ".join(_format_value(v) for v in value)
    return str(value)


def dump_config(cfg: RunConfig) -> str:
    """The resolved configuration in the same schema `parse_config` reads."""
    lines = []
    for name in RunConfig.model_fields:
        section: BaseModel = getattr(cfg, name)
        lines.append(f"[{name}]")
        for key in type(section).model_fields:
            lines.append(f"{key} = {_format_value(getattr(section, key))}".rstrip())
        lines.append("")
    return "\n".join(lines)
