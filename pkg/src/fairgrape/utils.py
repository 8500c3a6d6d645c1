"""Small helpers shared by the harness, storage and CLI"""
import hashlib
import json
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from slugify import slugify


def now_iso() -> str:
    """Get current timestamp in ISO format"""
    return datetime.now(timezone.utc).isoformat().replace("+00:00", "Z")


def ok(message: str, data: Optional[Dict[str, Any]] = None, hints: Optional[List[str]] = None) -> Dict[str, Any]:
    """Create success result"""
    return {
        "success": True,
        "message": message,
        "data": data or {},
        "hints": hints or [],
        "timestamp": now_iso(),
    }


def err(message: str, details: Optional[Dict[str, Any]] = None, hints: Optional[List[str]] = None) -> Dict[str, Any]:
    """Create error result"""
    return {
        "success": False,
        "message": message,
        "data": {"error_details": details or {}},
        "hints": hints or [],
        "timestamp": now_iso(),
    }


def canonical_json(value: Any, indent: Optional[int] = 2) -> str:
    """Sorted keys and Python's shortest float repr, so equal values give equal bytes"""
    return json.dumps(value, sort_keys=True, indent=indent, allow_nan=False) + ("\n" if indent else "")


def config_hash(config: Any) -> str:
    payload = config.model_dump(mode="json") if hasattr(config, "model_dump") else config
    return hashlib.sha256(canonical_json(payload, indent=None).encode("utf-8")).hexdigest()


def sha256_file(path: Union[str, Path]) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def run_slug(name: str, method: str, keep_fraction: float, digest: str) -> str:
    """Directory name for one run, e.g. ``biased-mlp-fairgrape-keep-0-1-3f2a9c1e``"""
    return slugify(f"{name} {method} keep {keep_fraction:g} {digest[:8]}")


def parse_seed_list(text: str) -> List[int]:
    return [int(part) for part in text.replace(" ", "").split(",") if part]
