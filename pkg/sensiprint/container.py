"""
文件容器与摘要

容器布局:
    第 1 行  magic + 空格 + 版本号, 例如 "SENSIPRINT-MODEL 1"
    第 2 行  JSON 头 (键排序、紧凑分隔符, UTF-8)
    其余     二进制载荷 (小端 float32 等), 长度由头中的 payload_bytes 声明
"""

import json
import os
import tempfile
from typing import Dict, Tuple

from sensiprint.errors import ParseError

FNV_OFFSET_BASIS = 14695981039346656037
FNV_PRIME = 1099511628211
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes, h: int = FNV_OFFSET_BASIS) -> int:
    """FNV-1a 64 位哈希"""
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h


def canonical_json(obj) -> str:
    """规范化 JSON 文本 (同一对象总是得到同一字节串)"""
    return json.dumps(obj, sort_keys=True, separators=(',', ':'), ensure_ascii=False, allow_nan=False)


def encode_header(magic: str, version: int, header: Dict) -> bytes:
    """编码前两行"""
    return f"{magic} {version}\n".encode('ascii') + canonical_json(header).encode('utf-8') + b"\n"


def encode(magic: str, version: int, header: Dict, payload: bytes) -> bytes:
    """编码完整容器"""
    header = dict(header, payload_bytes=len(payload))
    return encode_header(magic, version, header) + payload


def decode(blob: bytes, magic: str, version: int) -> Tuple[Dict, bytes]:
    """解码容器, 返回 (header, payload)"""
    if not blob:
        raise ParseError("empty file", 0)

    end1 = blob.find(b"\n")
    if end1 < 0:
        raise ParseError("missing magic line", 0)
    try:
        found_magic, found_version = blob[:end1].decode('ascii').split(' ')
        found_version = int(found_version)
    except (UnicodeDecodeError, ValueError):
        raise ParseError("malformed magic line", "line 1")
    if found_magic != magic:
        raise ParseError(f"expected {magic}, found {found_magic}", "line 1")
    if found_version != version:
        raise ParseError(f"unsupported version {found_version}, this build reads version {version}", "line 1")

    end2 = blob.find(b"\n", end1 + 1)
    if end2 < 0:
        raise ParseError("truncated header", end1 + 1)
    try:
        header = json.loads(blob[end1 + 1:end2].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ParseError(f"malformed header: {e}", "line 2")
    if not isinstance(header, dict) or 'payload_bytes' not in header:
        raise ParseError("header lacks payload_bytes", "line 2")

    payload = blob[end2 + 1:]
    expected = header['payload_bytes']
    if len(payload) != expected:
        raise ParseError(f"payload has {len(payload)} bytes, header declares {expected}", end2 + 1 + min(len(payload), expected))
    return header, payload


def read_file(path: str, magic: str, version: int) -> Tuple[Dict, bytes]:
    """读取容器文件"""
    with open(path, 'rb') as f:
        return decode(f.read(), magic, version)


def atomic_write(path: str, data: bytes) -> None:
    """原子写入: 先写临时文件再替换"""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix='.tmp-')
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
