"""Checkpoint manifest files.

A manifest is the single file handed to restart tooling in place of a
per-rank list of image paths, so command lines stay short no matter how
many ranks or how long the paths. Format (UTF-8, LF):

    MANIFEST v1 epoch=<E> world=<N>
    rank <r> <absolute path>
    ...

Exactly one image path per rank in [0, world).
"""

from dataclasses import dataclass
from pathlib import Path

from .errors import DuplicateRank, MalformedLine, MissingRank


@dataclass(frozen=True)
class Manifest:
    epoch: int
    world_size: int
    entries: dict  # rank -> absolute image path


def write_manifest(path, epoch, world_size, entries):
    lines = [f"MANIFEST v1 epoch={epoch} world={world_size}"]
    for rank in sorted(entries):
        lines.append(f"rank {rank} {Path(entries[rank]).absolute()}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return str(path)


def read_manifest(path):
    text = Path(path).read_text(encoding="utf-8")
    lines = [ln for ln in text.split("\n") if ln.strip()]
    if not lines:
        raise MalformedLine("empty manifest")
    head = lines[0].split()
    if len(head) != 4 or head[0] != "MANIFEST" or head[1] != "v1" or \
            not head[2].startswith("epoch=") or not head[3].startswith("world="):
        raise MalformedLine(f"bad manifest header: {lines[0]!r}")
    try:
        epoch = int(head[2][6:])
        world = int(head[3][6:])
    except ValueError as exc:
        raise MalformedLine(f"bad manifest header: {lines[0]!r}") from exc
    entries = {}
    for ln in lines[1:]:
        parts = ln.split(maxsplit=2)
        if len(parts) != 3 or parts[0] != "rank":
            raise MalformedLine(f"bad manifest line: {ln!r}")
        try:
            rank = int(parts[1])
        except ValueError as exc:
            raise MalformedLine(f"bad manifest line: {ln!r}") from exc
        if rank in entries:
            raise DuplicateRank(rank)
        if not 0 <= rank < world:
            raise MalformedLine(f"rank {rank} outside world {world}")
        entries[rank] = parts[2]
    for rank in range(world):
        if rank not in entries:
            raise MissingRank(rank)
    return Manifest(epoch, world, entries)
