# Copyright 2026 The dlostate authors
"""Collection of general helper functions."""

from __future__ import annotations

import contextlib
import functools
import json
import logging
import os
import shutil
import sys

from typing import IO, Any, Final, Iterator, Mapping

import colorama
import numpy as np
import tabulate

from py import io as py_io


IS_WINDOWS: Final[bool] = sys.platform == "win32"
LOG_FORMAT: Final[str] = "%(levelname)s %(name)s: %(message)s"


def configure_logging(verbosity: int, quiet: bool = False) -> None:
    """Route package logs to stderr at a level picked by ``-v`` count."""
    if quiet:
        level = logging.ERROR
    elif verbosity >= 2:
        level = logging.DEBUG
    elif verbosity == 1:
        level = logging.INFO
    else:
        level = logging.WARNING
    root = logging.getLogger("dlostate")
    root.setLevel(level)
    if not any(getattr(h, "_dlostate", False) for h in root.handlers):
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        handler._dlostate = True  # type: ignore[attr-defined]
        root.addHandler(handler)


@contextlib.contextmanager
def smart_open(
    filename: str | None = None, fmode: str = "w"
) -> Iterator[IO[Any]]:
    """Context manager to handle both stdout & files in the same manner.

    :param filename: Filename to open; ``None`` or ``"-"`` means stdout.
    :param fmode: Mode in which to open a given file.
    """
    if filename and filename != "-":
        fh = open(filename, fmode, encoding="utf-8")
    else:
        fh = sys.stdout

    try:
        yield fh
    finally:
        if fh is not sys.stdout:
            fh.close()


def _jsonable(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


def dumps(record: Mapping[str, Any]) -> str:
    """Canonical JSON: sorted keys, numpy values converted."""
    return json.dumps(record, sort_keys=True, default=_jsonable)


class JsonLinesWriter:
    """Append one JSON object per line to a file."""

    def __init__(self, path: str, mode: str = "w"):
        self.path = path
        self._fh = open(path, mode, encoding="utf-8")

    def write(self, record: Mapping[str, Any]) -> None:
        self._fh.write(dumps(record) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> JsonLinesWriter:
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()


def read_json_lines(path: str) -> list[dict[str, Any]]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def write_json(path: str, data: Mapping[str, Any]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(data, sort_keys=True, indent=2, default=_jsonable))
        f.write("\n")


def millimeters(value: float | None) -> str:
    """Format a length in meters as millimeters; ``-`` when absent."""
    if value is None:
        return "-"
    return f"{value * 1000.0:.1f}"


class OutputFormatter:
    """Human-readable tables for terminal output."""

    TERMINAL_WIDTH, _ = shutil.get_terminal_size((80, 20))
    TABLE_SEPARATOR = ["---"]

    def __init__(self, color: bool = True, file: IO[Any] | None = None):
        self.color = color
        self.tw = py_io.TerminalWriter(file=file)

    def should_markup(self) -> bool:
        """Return whether or not color markup should be added to output."""
        if self.color is False:
            return False

        if os.environ.get("DLOSTATE_COLOR", "").lower() in ("0", "false"):
            return False

        # this will do some extra checks (java + nt runtime, is atty, etc)
        if not self.tw.hasmarkup:
            return False

        return True

    def set_status_markup(self, padded_cells: list[str]) -> list[str]:
        """Color a row by the PASSED/FAILED status in its last cell."""
        if not self.should_markup():
            return padded_cells

        status = padded_cells[-1]
        if "FAILED" in status:
            markup = colorama.Fore.RED
        elif "PASSED" in status:
            markup = colorama.Fore.GREEN
        else:
            return padded_cells

        return [
            markup + cell + colorama.Style.RESET_ALL for cell in padded_cells
        ]

    def _line_formatter(
        self,
        padded_cells: list[str],
        colwidths: list[int],
        colaligns: list[str],
        table_type: str,
    ) -> str:
        """Format rows of a table to fit terminal.

        :param list(str) padded_cells: row where each cell is padded with
            spacing.
        :param list(int) colwidths: list of widths, by column order.
        :param list(str) colaligns: list of column alignment, by column
            order. Possible values: ``"left"``, ``"right"``, ``"center"``.
        :param str table_type: ``"status"`` rows get PASSED/FAILED color,
            ``"summary"`` rows are printed as is.

        :return: a formatted table row
        :rtype: str
        """
        sep, padder = "|", " "
        final_row_width = sum([len(x) for x in padded_cells]) + (
            (len(padded_cells) + 1) * len(sep)
        )
        if IS_WINDOWS:
            final_row_width += 1
        extra_padding = max(self.TERMINAL_WIDTH - final_row_width, 0)

        if padded_cells[0].strip() == self.TABLE_SEPARATOR[0]:
            padder = "-"
            padded_cells = [len(c) * padder for c in padded_cells]

        padding_per_cell = int(extra_padding / len(padded_cells))
        final_row_width += len(padded_cells) * padding_per_cell
        remaining_padding = max(0, self.TERMINAL_WIDTH - final_row_width)

        if table_type == "status":
            padded_cells = self.set_status_markup(padded_cells)

        to_join = []
        for index, (cell, alignment) in enumerate(
            zip(padded_cells, colaligns)
        ):
            cell_padding = padding_per_cell
            if index == 0:
                cell_padding += remaining_padding
            if alignment == "right":
                to_append = (padder * cell_padding) + cell
            elif alignment == "center":
                left_padding = cell_padding // 2
                right_padding = cell_padding - left_padding
                to_append = (
                    (padder * left_padding) + cell + (padder * right_padding)
                )
            else:  # default to left
                to_append = cell + (padder * cell_padding)
            to_join.append(to_append)

        ret = sep + sep.join(to_join) + sep
        return ret.rstrip()

    def get_table_formatter(self, table_type: str) -> tabulate.TableFormat:
        """Get a `tabulate` table formatter.

        :param str table_type: either ``"status"`` or ``"summary"``.
        """
        assert table_type in (
            "status",
            "summary",
        ), f"'{table_type}' is not a supported table type"
        line_formatter = functools.partial(
            self._line_formatter, table_type=table_type
        )
        return tabulate.TableFormat(
            lineabove=None,
            linebelowheader=None,
            linebetweenrows=None,
            linebelow=None,
            headerrow=line_formatter,
            datarow=line_formatter,
            padding=1,
            with_header_hide=None,
        )

    def print_table(
        self,
        title: str,
        rows: list[list[str]],
        table_type: str = "summary",
        colalign: tuple[str, ...] | None = None,
    ) -> None:
        """Print a separator titled ``title`` and a justified table."""
        to_print = tabulate.tabulate(
            rows,
            tablefmt=self.get_table_formatter(table_type),
            colalign=colalign,
        )
        self.tw.sep("-", title=title, fullwidth=self.TERMINAL_WIDTH)
        self.tw.line(to_print)

    def print_status(self, passed: bool, message: str) -> None:
        """Closing ``RESULT: PASSED|FAILED`` line."""
        status, color = "PASSED", {"green": True}
        if not passed:
            status, color = "FAILED", {"red": True}
        if not self.should_markup():
            color = {}
        self.tw.sep(
            "-",
            title=f"RESULT: {status} ({message})",
            fullwidth=self.TERMINAL_WIDTH,
            **color,
        )
