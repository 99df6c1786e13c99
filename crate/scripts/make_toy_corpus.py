"""Writes the small bundled corpus used by the end-to-end tests.

30 users, 50 books, about 400 reviews. Output is fully determined by the
seed, so re-running it reproduces the checked-in files byte for byte.
"""

import argparse
import json
import random
from pathlib import Path

GENRES = ["science fiction", "fantasy", "mystery", "history", "poetry"]
ADJECTIVES = ["Silent", "Golden", "Broken", "Distant", "Hidden", "Last", "Iron", "Paper", "Winter", "Burning"]
NOUNS = ["Harbor", "Empire", "Garden", "Signal", "River", "Archive", "Orbit", "Crown", "Lantern", "Atlas"]
AUTHORS = ["A. Moreau", "B. Okafor", "C. Lindqvist", "D. Tanaka", "E. Haddad", "F. Ruiz", "G. Novak"]
OPINIONS = [
    "Could not put it down.",
    "Slow start, strong finish.",
    "The world building carried it.",
    "Characters felt thin.",
    "A quiet, careful book.",
    "Better than the first volume.",
]


def write_jsonl(path, rows):
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", type=Path, default=Path(__file__).resolve().parent.parent / "data" / "toy")
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--users", type=int, default=30)
    parser.add_argument("--items", type=int, default=50)
    args = parser.parse_args()
    rng = random.Random(args.seed)
    args.out.mkdir(parents=True, exist_ok=True)

    items = []
    for i in range(args.items):
        title = f"The {ADJECTIVES[i % 10]} {NOUNS[(i * 3 + i // 10) % 10]}"
        items.append({
            "item_id": f"b{1000 + i}",
            "title": title,
            "authors": rng.choice(AUTHORS),
            "genre": GENRES[i % len(GENRES)],
            "average_rating": f"{rng.uniform(3.0, 4.8):.2f}",
            "ratings_count": str(rng.randint(50, 5000)),
            "text_reviews_count": str(rng.randint(5, 400)),
        })

    users = []
    reviews = []
    base = 1_600_000_000
    for u in range(args.users):
        uid = f"r{u:03d}"
        favourite = u % len(GENRES)
        users.append({"user_id": uid, "favourite_genre": GENRES[favourite], "joined": str(2015 + u % 8)})
        # Between 4 and 24 books, weighted towards the favourite genre.
        n = rng.randint(4, 24)
        pool = [it for k, it in enumerate(items) if k % len(GENRES) == favourite]
        others = [it for k, it in enumerate(items) if k % len(GENRES) != favourite]
        chosen = rng.sample(pool, min(len(pool), n // 2 + 1))
        chosen += rng.sample(others, n - len(chosen))
        rng.shuffle(chosen)
        t = base + rng.randint(0, 10_000_000)
        for it in chosen:
            t += rng.randint(3600, 20 * 86400)
            reviews.append({
                "user_id": uid,
                "item_id": it["item_id"],
                "timestamp": t,
                "rating": rng.randint(2, 5),
                "review_text": rng.choice(OPINIONS),
            })

    write_jsonl(args.out / "users.jsonl", users)
    write_jsonl(args.out / "items.jsonl", items)
    write_jsonl(args.out / "reviews.jsonl", reviews)
    print(f"{len(users)} users, {len(items)} items, {len(reviews)} reviews -> {args.out}")


if __name__ == "__main__":
    main()
