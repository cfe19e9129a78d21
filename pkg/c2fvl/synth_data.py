#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Synthetic chest images with lesion masks and matching lesion reports.

Every image shows two lung fields (see ``c2fvl.zones``) on a brighter body background. Lesions are soft-edged
ellipses, at most one per lung zone, each fully inside its zone; the mask is the union of the ellipses, and the report
is the canonical text of the placement, so that ``parse_report(report)`` encodes exactly the zones the mask occupies.

With ``SyntheticSpec.ambiguous``, every lesion gets an identical unlabelled decoy in the mirrored zone of the other
lung, and only the report tells which of the two is the lesion.

On disk, a dataset directory holds ``images/<id>.png``, ``masks/<id>.png`` and ``reports.tsv``; ids carry their split
as a prefix (e.g. "train_00012").
"""

from dataclasses import dataclass, field
import logging
from pathlib import Path

import numpy as np
from tqdm import tqdm

from c2fvl import png
from c2fvl.errors import CorruptIndex, DataShapeError, InfeasiblePlacement
from c2fvl.report_codec import ReportAst, decode_vector, encode_vector, read_reports, report_to_vector, write_reports
from c2fvl.zones import LUNGS, ZONES, box_mask, lung_field_box, validate_convention, vector_slot, zone_box


logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
REPORTS_FILE = "reports.tsv"

_MASK64 = (1 << 64) - 1
_GOLDEN_GAMMA = 0x9E3779B97F4A7C15


def splitmix64(x):
    """
    The splitmix64 finalizer: a bijective mix of a 64-bit integer.
    """
    z = x & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def sample_seed(master_seed, index):
    """
    Seed of the ``index``-th sample (0-based): output number ``index + 1`` of a splitmix64 generator started at
    ``master_seed``, i.e. `splitmix64(master_seed + (index + 1) * 0x9E3779B97F4A7C15)`.
    """
    return splitmix64((master_seed & _MASK64) + (index + 1) * _GOLDEN_GAMMA)


def split_sizes(total, ratios):
    """
    Split ``total`` samples by the given ratios with the largest remainder method (ties go to the earlier part).

    Examples
    --------
    >>> split_sizes(200, (4, 1))
    [160, 40]
    >>> split_sizes(100, (8, 1, 1))
    [80, 10, 10]
    """
    if total < 0:
        raise ValueError("Cannot split {} samples.".format(total))
    ratios = [float(r) for r in ratios]
    if not ratios or any(r < 0 for r in ratios) or sum(ratios) <= 0:
        raise ValueError("Invalid split ratios: {}".format(ratios))
    quotas = [total * r / sum(ratios) for r in ratios]
    sizes = [int(np.floor(q)) for q in quotas]
    order = sorted(range(len(ratios)), key=lambda k: (-(quotas[k] - sizes[k]), k))
    for k in order[:total - sum(sizes)]:
        sizes[k] += 1
    return sizes


@dataclass
class SyntheticSpec:
    """
    Parameters of the synthetic generator.

    Parameters
    ----------
    image_size : int
        Edge length of the square images.
    count_range : tuple
        Inclusive range of the number of lesions per image (each in its own zone, so at most 6).
    bilateral_probability : float
        Probability that an image with two or more lesions has lesions in both lungs.
    zone_weights : tuple
        Relative frequencies of the upper, middle and lower zone.
    radius_range : tuple
        Range of the ellipse semi-axes in pixels (at least 1); upper values are clipped to what fits into a zone.
    intensity_range : tuple
        Range of the lesion amplitudes added to the lung background.
    noise_sigma, texture_amplitude : float
        Standard deviation of the pixel noise and of the coarse lung texture.
    lung_level, body_level : float
        Mean intensities of the lung fields and of the surrounding body.
    edge : float
        Width of the lesions' soft edge in pixels.
    convention : str
        Orientation convention of the lung fields (see ``c2fvl.zones``).
    ambiguous : bool
        Unilateral lesions with mirrored decoys.
    seed : int
        Master seed of ``write_dataset``.
    """
    image_size: int = 64
    count_range: tuple = (1, 3)
    bilateral_probability: float = 0.5
    zone_weights: tuple = (1.0, 1.0, 1.0)
    radius_range: tuple = (2.0, 5.0)
    intensity_range: tuple = (0.45, 0.75)
    noise_sigma: float = 0.02
    texture_amplitude: float = 0.03
    lung_level: float = 0.15
    body_level: float = 0.5
    edge: float = 1.0
    convention: str = "radiological"
    ambiguous: bool = False
    seed: int = 0

    def validate(self):
        validate_convention(self.convention)
        if self.image_size < 16 or self.image_size % 2:
            raise ValueError("Image size must be even and at least 16, not {}.".format(self.image_size))
        lo, hi = self.count_range
        if not 0 <= lo <= hi <= 2 * len(ZONES):
            raise ValueError("Invalid lesion count range: {}".format(self.count_range))
        if self.ambiguous and hi > len(ZONES):
            raise ValueError("Ambiguous samples are unilateral, so at most {} lesions fit.".format(len(ZONES)))
        if not 0 <= self.bilateral_probability <= 1:
            raise ValueError("Invalid bilateral probability: {}".format(self.bilateral_probability))
        if len(self.zone_weights) != len(ZONES) or min(self.zone_weights) < 0 or sum(self.zone_weights) <= 0:
            raise ValueError("Invalid zone weights: {}".format(self.zone_weights))
        if not 1 <= self.radius_range[0] <= self.radius_range[1]:
            raise ValueError("Invalid radius range: {}".format(self.radius_range))
        if not 0 < self.intensity_range[0] <= self.intensity_range[1]:
            raise ValueError("Invalid intensity range: {}".format(self.intensity_range))
        if self.noise_sigma < 0 or self.texture_amplitude < 0 or self.edge <= 0:
            raise ValueError("Noise, texture and edge parameters must be non-negative (edge positive).")


@dataclass
class Sample:
    """
    One image with its lesion mask and report.

    Attributes
    ----------
    sample_id : str
    image : numpy.ndarray
        2D float64 array with values in [0, 1].
    mask : numpy.ndarray
        2D uint8 array of zeros and ones.
    report : str
    vector : numpy.ndarray
        The report's text vector.
    boxes : list
        Half-open bounding boxes `(row0, row1, col0, col1)` of the lesions, in text vector order.
    """
    sample_id: str
    image: np.ndarray
    mask: np.ndarray
    report: str
    vector: np.ndarray
    boxes: list = field(default_factory=list)


@dataclass
class Dataset:
    """
    An ordered collection of samples.
    """
    samples: list

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, index):
        return self.samples[index]

    def __iter__(self):
        return iter(self.samples)

    @property
    def ids(self):
        return [s.sample_id for s in self.samples]

    def subset(self, split):
        """
        Return the samples whose id starts with "<split>_".
        """
        prefix = "{}_".format(split)
        return Dataset([s for s in self.samples if s.sample_id.startswith(prefix)])

    def arrays(self, indices=None):
        """
        Stack (a selection of) the samples: images `(N, 1, H, W)` float64, masks `(N, 1, H, W)` float64, and text
        vectors `(N, 8)` float64.
        """
        chosen = self.samples if indices is None else [self.samples[i] for i in indices]
        images = np.stack([s.image for s in chosen])[:, np.newaxis].astype(np.float64)
        masks = np.stack([s.mask for s in chosen])[:, np.newaxis].astype(np.float64)
        vectors = np.stack([s.vector for s in chosen]).astype(np.float64)
        return images, masks, vectors

    def check_shapes(self, divisor=1):
        """
        Make sure all samples are square images of one size, divisible by ``divisor``, with masks of the same shape.

        Raises
        ------
        DataShapeError
            Naming the first offending sample.
        """
        if not self.samples:
            raise DataShapeError("The dataset is empty.")
        shape = self.samples[0].image.shape
        for s in self.samples:
            if s.image.ndim != 2 or s.image.shape != shape or s.mask.shape != shape:
                raise DataShapeError("Sample {!r}: image {} and mask {} do not match {}.".format(
                    s.sample_id, s.image.shape, s.mask.shape, shape))
        if shape[0] != shape[1] or shape[0] % divisor:
            raise DataShapeError("Image shape {} is not square or not divisible by {}.".format(shape, divisor))


def lesion_boxes(mask, convention="radiological"):
    """
    Bounding boxes of the mask's foreground within each occupied lung zone, in text vector order.
    """
    mask = np.asarray(mask) != 0
    size = mask.shape[0]
    boxes = []
    for lung in LUNGS:
        for zone in ZONES:
            r0, r1, c0, c1 = zone_box(size, lung, zone, convention)
            rows, cols = np.nonzero(mask[r0:r1, c0:c1])
            if rows.size:
                boxes.append((r0 + int(rows.min()), r0 + int(rows.max()) + 1,
                              c0 + int(cols.min()), c0 + int(cols.max()) + 1))
    return boxes


def _choose(rng, candidates, weights, k):

    weights = np.asarray(weights, dtype=np.float64)
    if np.count_nonzero(weights) < k:
        raise InfeasiblePlacement("Cannot place {} lesions in zones {}: zones exhausted.".format(k, candidates))
    picked = rng.choice(len(candidates), size=k, replace=False, p=weights / weights.sum())
    return [candidates[i] for i in sorted(picked)]


def draw_placements(spec, rng):
    """
    Draw the lesion zones of one sample: a list of distinct `(lung, zone)` pairs.
    """
    count = int(rng.integers(spec.count_range[0], spec.count_range[1] + 1))
    if count == 0:
        return []
    zone_weight = dict(zip(ZONES, spec.zone_weights))
    # more lesions than one lung has zones are always bilateral
    bilateral = not spec.ambiguous and count >= 2 and (count > len(ZONES) or rng.random() < spec.bilateral_probability)
    if not bilateral:
        lung = LUNGS[int(rng.integers(len(LUNGS)))]
        return _choose(rng, [(lung, z) for z in ZONES], [zone_weight[z] for z in ZONES], count)

    placements = []
    for lung in LUNGS:
        placements += _choose(rng, [(lung, z) for z in ZONES], [zone_weight[z] for z in ZONES], 1)
    rest = [(lung, z) for lung in LUNGS for z in ZONES if (lung, z) not in placements]
    placements += _choose(rng, rest, [zone_weight[z] for _, z in rest], count - 2)
    return sorted(placements, key=lambda p: vector_slot(*p))


def _check_placements(spec, placements):

    placements = [tuple(p) for p in placements]
    for lung, zone in placements:
        if lung not in LUNGS or zone not in ZONES:
            raise ValueError("Unknown lung zone: {} {}".format(zone, lung))
    if len(set(placements)) != len(placements):
        raise InfeasiblePlacement("At most one lesion per zone: {}".format(placements))
    if spec.ambiguous and len({lung for lung, _ in placements}) > 1:
        raise InfeasiblePlacement("Ambiguous samples are unilateral: {}".format(placements))
    return sorted(placements, key=lambda p: vector_slot(*p))


def lesion_profile(size, center, radii, amplitude, edge=1.0):
    """
    Render one soft-edged ellipse.

    Returns
    -------
    tuple
        `(support, profile)`: the boolean pixels with normalized squared distance `d2 <= 1` from the center, and the
        intensities `clip((1 - sqrt(d2)) * r / edge + 0.5, 0, 1) * amplitude` with `r` the smaller semi-axis.
    """
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = center
    ry, rx = radii
    d2 = ((rows - cy) / ry) ** 2 + ((cols - cx) / rx) ** 2
    support = d2 <= 1
    profile = np.clip((1 - np.sqrt(d2)) * min(ry, rx) / edge + 0.5, 0, 1) * amplitude
    return support, profile


def _place_lesion(spec, rng, lung, zone):

    r0, r1, c0, c1 = zone_box(spec.image_size, lung, zone, spec.convention)
    ry_max, rx_max = (r1 - r0 - 1) / 2, (c1 - c0 - 1) / 2
    r_min, r_max = spec.radius_range
    if r_min > min(ry_max, rx_max):
        raise InfeasiblePlacement("A lesion of radius {} does not fit into the {} {} zone {}.".format(
            r_min, zone, lung, (r0, r1, c0, c1)))
    ry = rng.uniform(r_min, min(r_max, ry_max))
    rx = rng.uniform(r_min, min(r_max, rx_max))
    cy = rng.uniform(r0 + ry, r1 - 1 - ry)
    cx = rng.uniform(c0 + rx, c1 - 1 - rx)
    amplitude = rng.uniform(*spec.intensity_range)
    return lesion_profile(spec.image_size, (cy, cx), (ry, rx), amplitude, spec.edge)


def _background(spec, rng):

    size = spec.image_size
    image = np.full((size, size), spec.body_level)
    coarse = rng.standard_normal((size // 4, size // 4)) * spec.texture_amplitude
    texture = png.resize_nearest(coarse, (size, size))
    for lung in LUNGS:
        field_mask = box_mask(size, lung_field_box(size, lung, spec.convention))
        image[field_mask] = spec.lung_level + texture[field_mask]
    return image


def generate_sample(spec, rng_state, placements=None, sample_id=""):
    """
    Generate one synthetic sample.

    Parameters
    ----------
    spec : SyntheticSpec
        Generator parameters.
    rng_state : int or numpy.random.Generator
        Seed (or generator) of this sample.
    placements : sequence, optional
        Force the lesion zones, as `(lung, zone)` pairs; an empty sequence gives a sample without lesions. If not given,
        the zones are drawn according to ``spec``.
    sample_id : str, optional
        Id of the sample.

    Returns
    -------
    Sample
        The sample; its image is not quantized.

    Raises
    ------
    InfeasiblePlacement
        If the lesions do not fit (zones exhausted, or zones too small for the minimal radius).
    """
    spec.validate()
    rng = rng_state if isinstance(rng_state, np.random.Generator) else np.random.default_rng(rng_state)
    if placements is None:
        placements = draw_placements(spec, rng)
    placements = _check_placements(spec, placements)

    size = spec.image_size
    image = _background(spec, rng)
    lesions = np.zeros((size, size))
    mask = np.zeros((size, size), dtype=bool)
    for lung, zone in placements:
        support, profile = _place_lesion(spec, rng, lung, zone)
        mask |= support
        lesions = np.maximum(lesions, profile)
        if spec.ambiguous:
            lesions = np.maximum(lesions, profile[:, ::-1])
    image = image + lesions + rng.normal(0.0, spec.noise_sigma, size=(size, size))
    image = np.clip(image, 0.0, 1.0)

    lungs = {lung for lung, _ in placements}
    ast = ReportAst(bilateral=len(lungs) == 2, lesion_count=len(placements),
                    left_zones=tuple(z for side, z in placements if side == "left"),
                    right_zones=tuple(z for side, z in placements if side == "right"))
    vector = encode_vector(ast)
    return Sample(sample_id=sample_id, image=image, mask=mask.astype(np.uint8), report=decode_vector(vector),
                  vector=vector, boxes=lesion_boxes(mask, spec.convention))


def generate_samples(spec, counts, verbose=False):
    """
    Generate the samples of a dataset with the given split counts, e.g. `{"train": 8, "val": 2}`.

    Sample `k` (counting across splits in the order train, val, test) is generated from ``sample_seed(spec.seed, k)``.
    """
    jobs = []
    for split in SPLITS:
        jobs += ["{}_{:05d}".format(split, i) for i in range(counts.get(split, 0))]
    samples = []
    for k, sample_id in enumerate(tqdm(jobs, desc="Generating", disable=not verbose)):
        samples.append(generate_sample(spec, sample_seed(spec.seed, k), sample_id=sample_id))
    return samples


def write_dataset(directory, n_train, n_val, n_test=0, spec=None, verbose=False):
    """
    Generate a synthetic dataset and write it to the given directory.

    Parameters
    ----------
    directory : str or pathlib.Path
        Target directory (created if necessary); existing files of the same names are overwritten.
    n_train, n_val, n_test : int
        Number of samples per split.
    spec : SyntheticSpec, optional
        Generator parameters (default: ``SyntheticSpec()``).
    verbose : bool, optional
        If `True`, show progress and log a summary (default: `False`).

    Returns
    -------
    Dataset
        The samples as written, i.e. with 8-bit quantized images, so that ``load_dataset`` returns equal samples.

    Raises
    ------
    IOError
        If writing fails.
    """
    spec = SyntheticSpec() if spec is None else spec
    if min(n_train, n_val, n_test) < 0:
        raise ValueError("Sample counts must be non-negative: {}".format((n_train, n_val, n_test)))
    directory = Path(directory)
    try:
        (directory / "images").mkdir(parents=True, exist_ok=True)
        (directory / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IOError(e)

    samples = generate_samples(spec, {"train": n_train, "val": n_val, "test": n_test}, verbose)
    for s in samples:
        png.save_image(directory / "images" / "{}.png".format(s.sample_id), s.image)
        png.save_mask(directory / "masks" / "{}.png".format(s.sample_id), s.mask)
        s.image = png.quantize(s.image)
    write_reports(directory / REPORTS_FILE, [(s.sample_id, s.report) for s in samples])
    if verbose:
        logger.info("Wrote %d samples (%d train, %d val, %d test) to %s", len(samples), n_train, n_val, n_test,
                    directory)
    return Dataset(samples)


def load_dataset(directory, convention="radiological", verbose=False):
    """
    Load a dataset directory written by ``write_dataset`` (or laid out the same way).

    Returns
    -------
    Dataset
        Samples in report index order.

    Raises
    ------
    CorruptIndex
        If the index is missing or malformed, an indexed image or mask is missing, or an image has no report line.
    ReportError
        If a report does not parse.
    IOError
        If a file cannot be read.
    """
    directory = Path(directory)
    index = directory / REPORTS_FILE
    if not index.is_file():
        raise CorruptIndex("Missing report index: {}".format(index))
    reports = read_reports(index)

    for path in sorted((directory / "images").glob("*.png")):
        if path.stem not in reports:
            raise CorruptIndex("Image {!r} has no report line in {}.".format(path.stem, index))

    samples = []
    for sample_id, report in reports.items():
        image_path = directory / "images" / "{}.png".format(sample_id)
        mask_path = directory / "masks" / "{}.png".format(sample_id)
        for path in (image_path, mask_path):
            if not path.is_file():
                raise CorruptIndex("Sample {!r} is indexed, but {} is missing.".format(sample_id, path))
        mask = png.open_mask(mask_path, verbose)
        samples.append(Sample(sample_id=sample_id, image=png.open_image(image_path, verbose), mask=mask,
                              report=report, vector=report_to_vector(report),
                              boxes=lesion_boxes(mask, convention) if mask.shape[0] == mask.shape[1] else []))
    logger.debug("Loaded %d samples from %s", len(samples), directory)
    return Dataset(samples)
