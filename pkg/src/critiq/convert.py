"""Convert rating-table style metadata into the manifest format.

Runnable as a script:

    python -m critiq.convert --ratings AVA.txt --comments comments.tsv \
        --styles styles.txt --image-dir images --image-ext .png \
        --out manifest.jsonl

Input formats (whitespace- and tab-separated text, one record per line):

- ratings: ``<index> <image_id> <c1> ... <c10> [ignored...]`` where c1..c10
  count the votes for scores 1..10; the rating becomes the vote-weighted
  mean. Extra trailing columns (tags, challenge ids) are ignored.
- comments: ``<image_id>\t<comment>``; repeated ids accumulate a comment list.
- styles: ``<image_id> <style_id>`` with 1-based style ids 1..14; repeated
  ids accumulate labels. Stored 0-based in the manifest.

Image paths are emitted as ``<image-dir>/<image_id><image-ext>`` relative to
the manifest; transcode sources to PNG or the raw raster format first (JPEG
decoding is out of scope).
"""

from __future__ import annotations

import argparse
import sys

from .data import NUM_STYLES, ManifestRecord, save_manifest


def mos_from_vote_counts(counts) -> float:
    """Vote-weighted mean score for ten counts of votes on the 1..10 scale."""
    counts = [float(c) for c in counts]
    if len(counts) != 10:
        raise ValueError(f"expected 10 vote counts, got {len(counts)}")
    total = sum(counts)
    if total <= 0:
        raise ValueError("vote counts sum to zero")
    return sum((i + 1) * c for i, c in enumerate(counts)) / total


def read_ratings(path: str) -> dict[str, float]:
    out: dict[str, float] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) < 12:
                raise ValueError(f"{path}:{lineno}: expected at least 12 columns")
            try:
                out[parts[1]] = mos_from_vote_counts(parts[2:12])
            except ValueError as e:
                raise ValueError(f"{path}:{lineno}: {e}") from e
    return out


def read_comments(path: str) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise ValueError(f"{path}:{lineno}: expected '<id>\\t<comment>'")
            image_id, comment = line.split("\t", 1)
            out.setdefault(image_id, []).append(comment)
    return out


def read_styles(path: str) -> dict[str, list[int]]:
    out: dict[str, list[int]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected '<id> <style_id>'")
            style = int(parts[1]) - 1
            if not (0 <= style < NUM_STYLES):
                raise ValueError(f"{path}:{lineno}: style id {parts[1]} outside 1..{NUM_STYLES}")
            out.setdefault(parts[0], []).append(style)
    return out


def build_manifest(out_path: str, image_dir: str = "images", image_ext: str = ".png",
                   ratings_path: str | None = None, comments_path: str | None = None,
                   styles_path: str | None = None) -> int:
    """Merge the given tables into one manifest; returns the record count.

    The id set is the union of ids across the provided tables.
    """
    ratings = read_ratings(ratings_path) if ratings_path else {}
    comments = read_comments(comments_path) if comments_path else {}
    styles = read_styles(styles_path) if styles_path else {}
    ids = sorted(set(ratings) | set(comments) | set(styles))
    if not ids:
        raise ValueError("no records found in any input table")
    records = [
        ManifestRecord(
            id=image_id,
            image=f"{image_dir}/{image_id}{image_ext}",
            comments=comments.get(image_id, []),
            mos=ratings.get(image_id),
            styles=sorted(set(styles[image_id])) if image_id in styles else None)
        for image_id in ids
    ]
    for rec in records:
        rec.validate()
    save_manifest(records, out_path)
    return len(records)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="python -m critiq.convert",
        description="build a manifest from rating/comment/style tables")
    parser.add_argument("--ratings", default=None)
    parser.add_argument("--comments", default=None)
    parser.add_argument("--styles", default=None)
    parser.add_argument("--image-dir", default="images")
    parser.add_argument("--image-ext", default=".png")
    parser.add_argument("--out", required=True)
    args = parser.parse_args(argv)
    try:
        count = build_manifest(args.out, image_dir=args.image_dir,
                               image_ext=args.image_ext, ratings_path=args.ratings,
                               comments_path=args.comments, styles_path=args.styles)
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    print(f"wrote {count} records -> {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
