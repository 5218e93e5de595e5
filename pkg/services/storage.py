"""
Storage helpers - ghi file nguyên tử (temp file + rename)
Artifacts are never half-written, so interrupted runs can resume.
"""
import hashlib
import os
import tempfile


def ensure_dir(path: str) -> str:
    """Create the directory if missing and return it"""
    if path and not os.path.exists(path):
        os.makedirs(path, exist_ok=True)
    return path


def atomic_write_bytes(path: str, data: bytes) -> str:
    """
    Write bytes to path atomically.

    Args:
        path: Destination file
        data: Full file content

    Returns:
        Absolute path of the written file
    """
    directory = os.path.dirname(os.path.abspath(path))
    ensure_dir(directory)
    fd, tmp_path = tempfile.mkstemp(prefix=".tmp_", dir=directory)
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise
    return os.path.abspath(path)


def atomic_write_text(path: str, text: str) -> str:
    return atomic_write_bytes(path, text.encode("utf-8"))


def file_sha256(path: str) -> str:
    """Hex sha256 of a file's bytes"""
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
