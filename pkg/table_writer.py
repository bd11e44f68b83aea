import csv
import io
import json
import logging
import math
import os
import sys
from typing import Any, Dict, Iterable, List, Optional, Sequence, TextIO

import numpy as np

logger = logging.getLogger(__name__)


class TableWriter:
    """Writes experiment tables as CSV preceded by a `# {json}` metadata line."""

    @staticmethod
    def format_value(value: Any) -> str:
        """Shortest round-trip text for floats; plain text for everything else."""
        if isinstance(value, (bool, np.bool_)):
            return "true" if value else "false"
        if isinstance(value, (int, np.integer)):
            return str(int(value))
        if isinstance(value, (float, np.floating)):
            value = float(value)
            if math.isnan(value):
                return "nan"
            if math.isinf(value):
                return "inf" if value > 0 else "-inf"
            return repr(value)
        if value is None:
            return ""
        return str(value)

    @staticmethod
    def header_line(metadata: Dict[str, Any]) -> str:
        return "# " + json.dumps(TableWriter.jsonable(metadata), sort_keys=True,
                                 separators=(",", ":"))

    @staticmethod
    def jsonable(value: Any) -> Any:
        if isinstance(value, dict):
            return {str(k): TableWriter.jsonable(v) for k, v in value.items()}
        if isinstance(value, (list, tuple)):
            return [TableWriter.jsonable(v) for v in value]
        if isinstance(value, np.ndarray):
            return TableWriter.jsonable(value.tolist())
        if isinstance(value, (np.integer,)):
            return int(value)
        if isinstance(value, (float, np.floating)):
            value = float(value)
            return value if math.isfinite(value) else repr(value)
        if isinstance(value, np.bool_):
            return bool(value)
        return value

    @staticmethod
    def render(metadata: Dict[str, Any], columns: Sequence[str],
               rows: Iterable[Sequence[Any]]) -> str:
        buf = io.StringIO()
        buf.write(TableWriter.header_line(metadata) + "\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            if len(row) != len(columns):
                raise ValueError(f"row has {len(row)} values for {len(columns)} columns")
            writer.writerow([TableWriter.format_value(v) for v in row])
        return buf.getvalue()

    @staticmethod
    def write(path: Optional[str], metadata: Dict[str, Any], columns: Sequence[str],
              rows: Iterable[Sequence[Any]], stream: Optional[TextIO] = None) -> str:
        """Write the table to `path` (or `stream`, or stdout) and return the text."""
        text = TableWriter.render(metadata, columns, rows)
        if path:
            directory = os.path.dirname(os.path.abspath(path))
            os.makedirs(directory, exist_ok=True)
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
            logger.info(f"Wrote table {path}")
        else:
            (stream or sys.stdout).write(text)
        return text

    @staticmethod
    def read(path: str) -> Dict[str, Any]:
        """Parse a table written by `write` into metadata, columns and string rows."""
        with open(path, "r", encoding="utf-8") as fh:
            first = fh.readline()
            if not first.startswith("# "):
                raise ValueError(f"{path} has no metadata line")
            metadata = json.loads(first[2:])
            reader = csv.reader(fh)
            columns = next(reader)
            rows: List[List[str]] = [row for row in reader]
        return {"metadata": metadata, "columns": columns, "rows": rows}

    @staticmethod
    def data_section(text: str) -> str:
        """Everything after the metadata line."""
        return text.split("\n", 1)[1] if "\n" in text else ""
