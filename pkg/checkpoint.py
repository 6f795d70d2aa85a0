"""
Checkpoint reading & writing.

A checkpoint directory holds manifest.txt (key = value lines: network
config, normalisation stats, layer list) and two little-endian float32
blobs per layer, <path>.weight.bin and <path>.bias.bin.
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from errors import CheckpointError, ConfigError, ParseError
from mini_psp import MiniPSP, NetworkConfig, layer_specs
from synth_data import ChannelStats
from tensor_core import ConvParams, Tensor4

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.txt"
CHECKPOINT_FORMAT = "detailer-checkpoint-v1"
BLOB_DTYPE = np.dtype("<f4")
LIST_FIELDS = ("encoder_channels", "ppm_bins")


def _format_value(value) -> str:
    if isinstance(value, (list, tuple)):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def save_checkpoint(network: MiniPSP, directory) -> Path:
    """ Write network to directory (created if missing) and return the manifest path. """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [f"format = {CHECKPOINT_FORMAT}"]
    lines += [f"{key} = {_format_value(value)}" for key, value in network.cfg.to_dict().items()]
    if network.normalization is not None:
        lines.append(f"norm_mean = {_format_value(network.normalization.mean)}")
        lines.append(f"norm_std = {_format_value(network.normalization.std)}")
    lines.append(f"layers = {','.join(network.params)}")

    for path, params in network.named_parameters():
        (directory / f"{path}.weight.bin").write_bytes(params.weights.values.astype(BLOB_DTYPE).tobytes())
        (directory / f"{path}.bias.bin").write_bytes(params.bias.astype(BLOB_DTYPE).tobytes())
    manifest = directory / MANIFEST_NAME
    manifest.write_text("\n".join(lines) + "\n")
    logger.debug("saved checkpoint with %d parameters to %s", network.parameter_count(), directory)
    return manifest


def _read_entries(directory) -> tuple[Path, dict[str, tuple[int, str]]]:
    """ (manifest path, key -> (byte offset of the line, value)). """
    path = Path(directory) / MANIFEST_NAME
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"no checkpoint manifest at {path}") from None
    entries = {}
    offset = 0
    for raw in data.splitlines(keepends=True):
        line = raw.decode("utf-8", errors="replace").strip()
        if line and not line.startswith("#"):
            if "=" not in line:
                raise ParseError(path, offset, f"expected 'key = value', got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            entries[key] = (offset, value)
        offset += len(raw)
    if entries.get("format", (0, None))[1] != CHECKPOINT_FORMAT:
        raise ParseError(path, 0, f"not a {CHECKPOINT_FORMAT} manifest")
    return path, entries


def read_manifest(directory) -> dict[str, str]:
    _, entries = _read_entries(directory)
    return {key: value for key, (_, value) in entries.items()}


def _numbers(path: Path, entries: dict[str, tuple[int, str]], key: str, cast) -> tuple:
    offset, raw = entries[key]
    try:
        return tuple(cast(v) for v in raw.split(","))
    except ValueError:
        raise ParseError(path, offset, f"'{key}' expects {cast.__name__} values, got {raw!r}") from None


def config_from_manifest(path: Path, entries: dict[str, tuple[int, str]]) -> NetworkConfig:
    values = {}
    for key in NetworkConfig.__dataclass_fields__:
        if key not in entries:
            raise CheckpointError(f"checkpoint manifest is missing '{key}'")
        if key == "injection":
            values[key] = entries[key][1]
            continue
        numbers = _numbers(path, entries, key, int)
        if key in LIST_FIELDS:
            values[key] = numbers
        elif len(numbers) != 1:
            raise ParseError(path, entries[key][0], f"'{key}' expects a single integer")
        else:
            values[key] = numbers[0]
    try:
        return NetworkConfig.from_dict(values)
    except ConfigError as err:
        raise CheckpointError(f"checkpoint config is invalid: {err}") from None


def _read_blob(path: Path, shape: tuple[int, ...]) -> np.ndarray:
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise ParseError(path, 0, "parameter blob not found") from None
    expected = int(np.prod(shape)) * BLOB_DTYPE.itemsize
    if len(data) != expected:
        raise ParseError(path, min(len(data), expected),
                         f"expected {expected} bytes for shape {shape}, found {len(data)}")
    return np.frombuffer(data, dtype=BLOB_DTYPE).reshape(shape).astype(np.float32)


def load_checkpoint(directory) -> MiniPSP:
    """
    Rebuild a network from a checkpoint directory.

    Raises:
        - CheckpointError: missing manifest, invalid config, or layer list mismatch
        - ParseError: malformed manifest line or value, or blob of the wrong size
    """
    directory = Path(directory)
    path, entries = _read_entries(directory)
    cfg = config_from_manifest(path, entries)
    specs = layer_specs(cfg)
    listed = entries.get("layers", (0, ""))[1].split(",")
    if listed != [spec.path for spec in specs]:
        raise CheckpointError(f"checkpoint layers {listed} do not match config layers {[s.path for s in specs]}")

    params = {}
    for spec in specs:
        weights = _read_blob(directory / f"{spec.path}.weight.bin", (spec.c_out, spec.c_in, spec.k, spec.k))
        bias = _read_blob(directory / f"{spec.path}.bias.bin", (spec.c_out,))
        params[spec.path] = ConvParams(Tensor4(weights), bias, spec.stride, spec.padding)

    normalization = None
    if "norm_mean" in entries and "norm_std" in entries:
        normalization = ChannelStats(_numbers(path, entries, "norm_mean", float),
                                     _numbers(path, entries, "norm_std", float))
    return MiniPSP(cfg, params, normalization)
