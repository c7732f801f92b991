#!/usr/bin/env python3
"""Builds the public-domain training corpus used by the desk-scale experiments.

Sources are two public-domain English bible translations distributed as npm
packages (KJV 1769 and the World English Bible). Each book becomes one
plain-text document. Output layout:

    <out>/train/<translation>_<book>.txt
    <out>/eval/<translation>_<book>.txt

Every 10th book (by sorted name) goes to eval.
"""
import argparse
import json
import pathlib
import re
import subprocess
import tarfile
import tempfile


def npm_fetch(name, version, workdir):
    subprocess.run(["npm", "pack", f"{name}@{version}"], cwd=workdir, check=True,
                   stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
    tgz = next(pathlib.Path(workdir).glob(f"{name}-{version}.tgz"))
    dest = pathlib.Path(workdir) / name
    with tarfile.open(tgz) as tf:
        tf.extractall(dest)
    return dest / "package"


def kjv_books(pkg):
    verses = json.loads((pkg / "json" / "verses-1769.json").read_text(encoding="utf-8"))
    books = {}
    for ref, text in verses.items():
        book, chapter_verse = ref.rsplit(" ", 1)
        chapter = int(chapter_verse.split(":")[0])
        text = text.replace("[", "").replace("]", "").lstrip("# ").strip()
        books.setdefault(book, []).append((chapter, text))
    out = {}
    for book, items in books.items():
        lines, current = [], None
        for chapter, text in items:
            if chapter != current:
                lines.append(f"\nChapter {chapter}\n")
                current = chapter
            lines.append(text)
        out[book] = "\n".join(lines).strip() + "\n"
    return out


def web_books(pkg):
    out = {}
    for path in sorted((pkg / "json").glob("*.json")):
        items = json.loads(path.read_text(encoding="utf-8"))
        parts, chapter = [], None
        for item in items:
            kind = item.get("type", "")
            if "chapterNumber" in item and item["chapterNumber"] != chapter:
                chapter = item["chapterNumber"]
                parts.append(f"\n\nChapter {chapter}\n\n")
            if kind.endswith("text"):
                parts.append(item["value"])
            elif kind in ("paragraph end", "stanza end", "line break"):
                parts.append("\n")
        text = re.sub(r"[ \t]+", " ", "".join(parts))
        text = re.sub(r"\n{3,}", "\n\n", text).strip() + "\n"
        out[path.stem] = text
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="data/corpus")
    args = ap.parse_args()
    out = pathlib.Path(args.out)
    (out / "train").mkdir(parents=True, exist_ok=True)
    (out / "eval").mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        docs = {}
        for book, text in kjv_books(npm_fetch("kjv", "1.0.0", tmp)).items():
            docs["kjv_" + re.sub(r"\W+", "", book.lower())] = text
        for book, text in web_books(npm_fetch("world-english-bible", "1.0.1", tmp)).items():
            docs["web_" + book] = text
    total = 0
    for i, name in enumerate(sorted(docs)):
        split = "eval" if i % 10 == 9 else "train"
        (out / split / f"{name}.txt").write_text(docs[name], encoding="utf-8")
        total += len(docs[name].encode("utf-8"))
    print(f"{len(docs)} documents, {total} bytes -> {out}")


if __name__ == "__main__":
    main()
