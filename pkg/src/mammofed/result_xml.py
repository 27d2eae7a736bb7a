"""Result sets and their XML text form.

The XML layout is fixed: a `resultset` element carrying query id, site,
version, and skip count, holding `record` elements (entity, id, site) that
hold `field` elements. Field values are canonical text, records sort by
(site, entity, id), the encoding is UTF-8 with no XML declaration, and the
five XML special characters are always escaped.

Row field values are rendered to canonical text once, at execution time,
so rows parsed back from a peer's XML compare byte-for-byte with local
rows.
"""

from __future__ import annotations

import json
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from datetime import date
from typing import Any, Iterable, Optional

_ESCAPES = (("&", "&amp;"), ("<", "&lt;"), (">", "&gt;"), ('"', "&quot;"), ("'", "&apos;"))


class ResultFormatError(ValueError):
    """Result XML does not follow the fixed layout."""


def xml_escape(text: str) -> str:
    for raw, esc in _ESCAPES:
        text = text.replace(raw, esc)
    return text


def value_text(v: Any) -> str:
    """Canonical text for a record field value."""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, str):
        return v
    if isinstance(v, date):
        return v.isoformat()
    if isinstance(v, (list, tuple)):
        return json.dumps([_jsonable(x) for x in v], separators=(",", ":"))
    raise ResultFormatError(f"unrenderable field value {v!r}")


def _jsonable(v: Any):
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, date):
        return v.isoformat()
    return v


@dataclass(frozen=True)
class Row:
    site: str
    entity: str
    id: str
    fields: tuple[tuple[str, str], ...]

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.site, self.entity, self.id)


@dataclass(frozen=True)
class ResultSet:
    query_id: str
    site_id: str
    rows: tuple[Row, ...]
    source_version: int
    skipped: int = 0


def sort_rows(rows: Iterable[Row]) -> tuple[Row, ...]:
    return tuple(sorted(rows, key=lambda r: r.key))


def _record_xml(row: Row) -> str:
    fields = "".join(
        f'<field name="{xml_escape(path)}">{xml_escape(value)}</field>'
        for path, value in row.fields)
    return (f'<record entity="{xml_escape(row.entity)}" id="{xml_escape(row.id)}"'
            f' site="{xml_escape(row.site)}">{fields}</record>')


def to_xml(r: ResultSet) -> str:
    """Render a per-site result set; empty sets self-close."""
    head = (f'<resultset query="{xml_escape(r.query_id)}" site="{xml_escape(r.site_id)}"'
            f' version="{r.source_version}" skipped="{r.skipped}"')
    if not r.rows:
        return head + "/>"
    body = "\n".join(_record_xml(row) for row in r.rows)
    return f"{head}>\n{body}\n</resultset>"


def merged_xml(query_id: str, origin_site: str, skipped: int,
               missing: tuple[tuple[str, str], ...], rows: tuple[Row, ...]) -> str:
    """Render a merged result set: same layout, no version attribute,
    plus one `missing` element per unreachable site."""
    head = (f'<resultset query="{xml_escape(query_id)}" site="{xml_escape(origin_site)}"'
            f' skipped="{skipped}"')
    parts = [f'<missing site="{xml_escape(s)}" reason="{xml_escape(reason)}"/>'
             for s, reason in missing]
    parts.extend(_record_xml(row) for row in rows)
    if not parts:
        return head + "/>"
    return f"{head}>\n" + "\n".join(parts) + "\n</resultset>"


@dataclass(frozen=True)
class ParsedResultSet:
    query_id: str
    site_id: str
    version: Optional[int]
    skipped: int
    missing: tuple[tuple[str, str], ...]
    rows: tuple[Row, ...]


def parse_resultset(text: str) -> ParsedResultSet:
    """Parse either a per-site or a merged result document."""
    try:
        root = ET.fromstring(text)
    except ET.ParseError as exc:
        raise ResultFormatError(f"malformed result xml: {exc}") from None
    if root.tag != "resultset":
        raise ResultFormatError(f"expected <resultset>, got <{root.tag}>")
    query_id = root.get("query")
    site_id = root.get("site")
    if query_id is None or site_id is None:
        raise ResultFormatError("resultset needs query and site attributes")
    version = root.get("version")
    missing: list[tuple[str, str]] = []
    rows: list[Row] = []
    for child in root:
        if child.tag == "missing":
            missing.append((child.get("site", ""), child.get("reason", "")))
        elif child.tag == "record":
            fields = tuple((f.get("name", ""), f.text or "")
                           for f in child if f.tag == "field")
            rows.append(Row(child.get("site", ""), child.get("entity", ""),
                            child.get("id", ""), fields))
        else:
            raise ResultFormatError(f"unexpected element <{child.tag}>")
    return ParsedResultSet(query_id, site_id,
                           int(version) if version is not None else None,
                           int(root.get("skipped", "0")),
                           tuple(missing), tuple(rows))


def resultset_from_xml(text: str, expected_query_id: Optional[str] = None) -> ResultSet:
    parsed = parse_resultset(text)
    if parsed.missing:
        raise ResultFormatError("per-site result must not carry missing markers")
    if parsed.version is None:
        raise ResultFormatError("per-site result needs a version attribute")
    if expected_query_id is not None and parsed.query_id != expected_query_id:
        raise ResultFormatError(
            f"query id mismatch: expected {expected_query_id}, got {parsed.query_id}")
    return ResultSet(parsed.query_id, parsed.site_id, sort_rows(parsed.rows),
                     parsed.version, parsed.skipped)
