"""Addresses of random-draw sites and the shorthand dictionary.

A full address is the '/'-joined list of call-site frame identifiers plus
the distribution tag name; the instance counter disambiguates repeated
visits to the same site within one execution.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

from .distributions import DistTag


@dataclass(frozen=True, order=True)
class Address:
    full: str
    instance: int = 1

    def __post_init__(self):
        if not self.full:
            raise ValueError("address string must be nonempty")

    def __str__(self):
        return f"{self.full}#{self.instance}"


class AddressCache:
    """Memoizes frame-list -> address-string concatenation.

    Concatenating and interning the frame strings is cheap here, but the
    cache keeps repeated resolutions of hot sites allocation-free and its
    hit/miss counters make the caching observable in tests.
    """

    def __init__(self):
        self._map: dict[tuple, str] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def __len__(self):
        return len(self._map)


def resolve_address(raw_frames: list[str], dist_tag: DistTag, cache: AddressCache) -> str:
    if not raw_frames:
        raise ValueError("frame list must be nonempty")
    key = (tuple(raw_frames), int(dist_tag))
    found = cache._map.get(key)
    if found is not None:
        cache.hits += 1
        return found
    with cache._lock:
        found = cache._map.get(key)
        if found is not None:
            cache.hits += 1
            return found
        full = "/".join(raw_frames) + "/" + DistTag(dist_tag).display_name
        cache._map[key] = full
        cache.misses += 1
        return full


class AddressDictionary:
    """Bijective map between full address strings and dense shorthand IDs.

    IDs are assigned in first-encounter order starting at 0; the mapping is
    append-only so serialized shards can carry deltas.
    """

    def __init__(self):
        self._to_id: dict[str, int] = {}
        self._to_full: list[str] = []

    def __len__(self):
        return len(self._to_full)

    def __contains__(self, full: str):
        return full in self._to_id

    def id_for(self, full: str) -> int:
        """Return the ID for `full`, assigning the next dense ID if new."""
        found = self._to_id.get(full)
        if found is not None:
            return found
        new_id = len(self._to_full)
        self._to_id[full] = new_id
        self._to_full.append(full)
        return new_id

    def lookup_id(self, full: str) -> int:
        """Return the ID for `full`; KeyError if unknown."""
        return self._to_id[full]

    def full_for(self, shorthand: int) -> str:
        return self._to_full[shorthand]

    def items(self):
        return enumerate(self._to_full)

    def merge_delta(self, entries: list[tuple[int, str]]):
        """Apply (id, full) pairs from a shard header; IDs must extend densely."""
        for shorthand, full in entries:
            if shorthand < len(self._to_full):
                if self._to_full[shorthand] != full:
                    raise ValueError(
                        f"dictionary conflict at id {shorthand}: "
                        f"{self._to_full[shorthand]!r} vs {full!r}")
                continue
            if shorthand != len(self._to_full):
                raise ValueError(f"non-dense dictionary delta at id {shorthand}")
            self._to_id[full] = shorthand
            self._to_full.append(full)
