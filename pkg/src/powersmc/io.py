"""Atomic artifact writing."""
from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Mapping, Union

Payload = Union[str, bytes, dict, list]


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, allow_nan=True) + "\n"


def write_artifacts(out_dir, files: Mapping[str, Payload]) -> list[Path]:
    """Write every file to a temporary name first, then rename them all into place.

    Nothing is renamed unless every payload was written successfully.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    staged = []
    try:
        for name, payload in files.items():
            if isinstance(payload, (dict, list)):
                payload = dumps(payload)
            data = payload.encode() if isinstance(payload, str) else payload
            fd, tmp = tempfile.mkstemp(prefix=f".{name}.", dir=out)
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            staged.append((tmp, out / name))
    except BaseException:
        for tmp, _ in staged:
            os.unlink(tmp)
        raise
    for tmp, dest in staged:
        os.replace(tmp, dest)
    return [dest for _, dest in staged]
