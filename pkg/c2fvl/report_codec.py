#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Compile short lesion reports such as

    "Bilateral pulmonary infection, two infected areas, upper middle left lung and middle lower right lung"

into the 8-dimensional text vector `[bilateral, count, left upper, left middle, left lower, right upper, right middle,
right lower]` (here: `[1, 2, 1, 1, 0, 0, 1, 1]`), and decode such vectors back into canonical report text.

The zero vector is the canonical encoding of "No pulmonary infection".
"""

from dataclasses import dataclass
import re

import numpy as np

from c2fvl.errors import CorruptIndex, InconsistentReport, InvalidVector, UnparseableReport
from c2fvl.zones import LUNGS, ZONES, vector_slot


#: Length of the text vector.
VECTOR_LENGTH = 8
#: Canonical report of the zero vector.
NO_INFECTION = "No pulmonary infection"

NUMBER_WORDS = ("one", "two", "three", "four", "five", "six", "seven", "eight", "nine")

_NO_INFECTION_RE = re.compile(r"^no\s+(?:pulmonary\s+)?infection$")
_HEADER_RE = re.compile(r"^(?:(bilateral|unilateral)\s+)?pulmonary\s+infection$")
_COUNT_RE = re.compile(r"^(\S+)\s+infected\s+areas?$")
_ZONE_PHRASE_RE = re.compile(r"^((?:(?:upper|middle|lower)\s+)+)(left|right)\s+lung$")
_AND_RE = re.compile(r"\s+and\s+")
_DIGITS_RE = re.compile(r"[0-9]+")


@dataclass(frozen=True)
class ReportAst:
    """
    Structured content of a lesion report.

    Parameters
    ----------
    bilateral : bool
        Whether both lungs are affected; must be `True` exactly if both zone sets are nonempty.
    lesion_count : int
        Number of infected areas; must be zero exactly if both zone sets are empty.
    left_zones, right_zones : frozenset
        Subsets of {"upper", "middle", "lower"}.

    Raises
    ------
    InconsistentReport
        If the invariants above are violated.
    """
    bilateral: bool = False
    lesion_count: int = 0
    left_zones: frozenset = frozenset()
    right_zones: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "left_zones", frozenset(self.left_zones))
        object.__setattr__(self, "right_zones", frozenset(self.right_zones))
        for zones in (self.left_zones, self.right_zones):
            unknown = zones - set(ZONES)
            if unknown:
                raise InconsistentReport("Unknown zone(s) {}.".format(sorted(unknown)))
        if int(self.lesion_count) != self.lesion_count or self.lesion_count < 0:
            raise InconsistentReport("Lesion count must be a non-negative integer, not {!r}.".format(self.lesion_count))
        both = bool(self.left_zones) and bool(self.right_zones)
        if self.bilateral != both:
            raise InconsistentReport("Bilateral flag {} contradicts the zones (left: {}, right: {}).".format(
                self.bilateral, sorted(self.left_zones), sorted(self.right_zones)))
        if (self.lesion_count == 0) != (not self.left_zones and not self.right_zones):
            raise InconsistentReport("Lesion count {} contradicts the zones (left: {}, right: {}).".format(
                self.lesion_count, sorted(self.left_zones), sorted(self.right_zones)))

    def zones_of(self, lung):
        """Return the zone set of the given lung ("left" or "right")."""
        return self.left_zones if lung == "left" else self.right_zones


def _normalize(text):

    text = " ".join(text.lower().split())
    return text.rstrip(".").strip()


def parse_count(token):
    """
    Parse a count token: a digit string or one of the English number words "one" to "nine".

    Raises
    ------
    UnparseableReport
        If the token is neither, or the count does not fit into a 64-bit integer.
    """
    if _DIGITS_RE.fullmatch(token):
        if int(token) >= 2 ** 63:
            raise UnparseableReport("Lesion count {} is too large.".format(token))
        return int(token)
    try:
        return NUMBER_WORDS.index(token) + 1
    except ValueError:
        raise UnparseableReport("Unrecognized lesion count {!r}.".format(token))


def count_word(count):
    """
    Spell out the given count in canonical form ("one" to "nine", digits for larger counts).
    """
    return NUMBER_WORDS[count - 1] if 1 <= count <= len(NUMBER_WORDS) else str(count)


def parse_report(text):
    """
    Parse a lesion report into a ``ReportAst``.

    The grammar is `[bilateral|unilateral] pulmonary infection, <count> infected area(s)[, <zone phrases>]`, where the
    zone phrases are joined by "and" or commas and each has the form `<zones> left lung` or `<zones> right lung` with
    `<zones>` any sequence of "upper", "middle", and "lower". Matching is case-insensitive; a trailing period is
    ignored. Without an explicit "bilateral"/"unilateral", laterality follows from the zones. "No pulmonary
    infection" parses to the empty report.

    Parameters
    ----------
    text : str
        The report.

    Returns
    -------
    ReportAst
        The parsed report.

    Raises
    ------
    UnparseableReport
        If the text does not follow the grammar.
    InconsistentReport
        If it does, but contradicts itself (e.g. "bilateral" with zones on one side only, or a positive count without
        any zone).
    """
    normalized = _normalize(text)
    if _NO_INFECTION_RE.match(normalized):
        return ReportAst()

    clauses = [c.strip() for c in normalized.split(",")]
    if len(clauses) < 2 or not all(clauses):
        raise UnparseableReport("Cannot parse report {!r}.".format(text))

    header = _HEADER_RE.match(clauses[0])
    if header is None:
        raise UnparseableReport("Unrecognized report header {!r}.".format(clauses[0]))
    laterality = header.group(1)

    count_match = _COUNT_RE.match(clauses[1])
    if count_match is None:
        raise UnparseableReport("Unrecognized lesion count clause {!r}.".format(clauses[1]))
    count = parse_count(count_match.group(1))

    zones = {lung: set() for lung in LUNGS}
    for clause in clauses[2:]:
        for phrase in _AND_RE.split(clause):
            match = _ZONE_PHRASE_RE.match(phrase)
            if match is None:
                raise UnparseableReport("Unrecognized zone phrase {!r}.".format(phrase))
            zones[match.group(2)].update(match.group(1).split())

    both = bool(zones["left"]) and bool(zones["right"])
    if laterality == "bilateral" and not both:
        raise InconsistentReport("Report {!r} says bilateral, but names zones of one lung only.".format(text))
    if laterality == "unilateral" and both:
        raise InconsistentReport("Report {!r} says unilateral, but names zones of both lungs.".format(text))

    return ReportAst(bilateral=both, lesion_count=count, left_zones=zones["left"], right_zones=zones["right"])


def encode_vector(ast):
    """
    Encode a ``ReportAst`` as an 8-dimensional text vector.

    Parameters
    ----------
    ast : ReportAst
        The report to be encoded.

    Returns
    -------
    numpy.ndarray
        Integer vector `[bilateral, count, left upper, left middle, left lower, right upper, right middle,
        right lower]`. The count is stored unnormalized; see ``normalize_vector``.
    """
    v = np.zeros(VECTOR_LENGTH, dtype=np.int64)
    v[0] = int(ast.bilateral)
    v[1] = int(ast.lesion_count)
    for lung in LUNGS:
        for zone in ast.zones_of(lung):
            v[vector_slot(lung, zone)] = 1
    return v


def validate_vector(v):
    """
    Validate a text vector and return it as an integer array.

    Besides the layout rules (flags in {0, 1}, non-negative integer count), a valid vector must be consistent: the
    bilateral flag is set exactly if both lungs have zones, and the count is zero exactly if no zone is set.

    Raises
    ------
    InvalidVector
        If the vector is invalid.
    """
    v = np.asarray(v, dtype=np.float64)
    msg = ""
    if v.shape != (VECTOR_LENGTH,):
        msg = "expected shape ({},), got {}".format(VECTOR_LENGTH, v.shape)
    elif not np.all(np.isfinite(v)):
        msg = "non-finite entries"
    elif not np.all(np.isin(v[[0, 2, 3, 4, 5, 6, 7]], [0, 1])):
        msg = "flags must be 0 or 1"
    elif v[1] < 0 or v[1] != np.round(v[1]):
        msg = "count {} is not a non-negative integer".format(v[1])
    elif v[1] >= 2.0 ** 63:
        msg = "count {} is out of the int64 range".format(v[1])
    else:
        left, right = v[2:5].sum(), v[5:8].sum()
        if v[0] != float(left > 0 and right > 0):
            msg = "bilateral flag {} contradicts zone indicators".format(int(v[0]))
        elif (v[1] == 0) != (left + right == 0):
            msg = "count {} contradicts zone indicators".format(int(v[1]))
    if msg:
        raise InvalidVector("The given text vector {} is not valid: {}.".format(v.tolist(), msg))
    return v.astype(np.int64)


def decode_vector(v):
    """
    Decode a text vector into its canonical report.

    Parameters
    ----------
    v : array_like
        Valid 8-dimensional text vector (see ``validate_vector``).

    Returns
    -------
    str
        Canonical report, e.g. "Unilateral pulmonary infection, one infected area, lower right lung", or
        "No pulmonary infection" for the zero vector. ``parse_report`` followed by ``encode_vector`` restores `v`.

    Raises
    ------
    InvalidVector
        If `v` is invalid.
    """
    v = validate_vector(v)
    count = int(v[1])
    if count == 0:
        return NO_INFECTION

    header = "Bilateral" if v[0] else "Unilateral"
    area = "area" if count == 1 else "areas"
    phrases = []
    for lung in LUNGS:
        zones = [zone for zone in ZONES if v[vector_slot(lung, zone)]]
        if zones:
            phrases.append("{} {} lung".format(" ".join(zones), lung))
    return "{} pulmonary infection, {} infected {}, {}".format(header, count_word(count), area, " and ".join(phrases))


def normalize_vector(v, count_scale=None):
    """
    Return a float copy of the text vector with the count divided by ``count_scale`` (if given).
    """
    v = np.asarray(v, dtype=np.float64).copy()
    if count_scale is not None:
        if count_scale <= 0:
            raise ValueError("count_scale must be positive, not {}.".format(count_scale))
        v[1] = v[1] / count_scale
    return v


def report_to_vector(text):
    """
    Shortcut for ``encode_vector(parse_report(text))``.
    """
    return encode_vector(parse_report(text))


def read_reports(path):
    """
    Read a report index file: UTF-8, one `<image-id>\\t<report>` per line.

    Returns
    -------
    dict
        Reports by image id, in file order.

    Raises
    ------
    CorruptIndex
        If a line has no tab or an id occurs twice.
    IOError
        If the file cannot be read.
    """
    reports = {}
    with open(str(path), "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            image_id, tab, report = line.partition("\t")
            if not tab:
                raise CorruptIndex("{}, line {}: expected '<image-id>\\t<report>'.".format(path, line_number))
            if image_id in reports:
                raise CorruptIndex("{}, line {}: duplicate id {!r}.".format(path, line_number, image_id))
            reports[image_id] = report
    return reports


def write_reports(path, reports):
    """
    Write a report index file from a mapping (or sequence of pairs) of image ids to reports.
    """
    items = reports.items() if hasattr(reports, "items") else reports
    with open(str(path), "w", encoding="utf-8", newline="\n") as f:
        for image_id, report in items:
            if "\t" in image_id or "\n" in report or "\t" in report:
                raise ValueError("Cannot write id {!r} with report {!r}.".format(image_id, report))
            f.write("{}\t{}\n".format(image_id, report))
