"""Template-generated corpora in the Snips three-file layout.

Used where the published Snips splits are not at hand: tests, demos and the
desk-scale acceptance runs.  Intents and slot labels follow Snips naming.

    python -m roslu.synth OUT_DIR --seed 0 --train 2000 --dev 300 --test 300
"""

from __future__ import annotations

import argparse
from pathlib import Path

from .data import RawExample, write_split
from .rng import Rng

FILLERS = {
    "artist": ["the rolling stones", "taylor swift", "miles davis", "the beatles", "daft punk",
               "nina simone", "bob marley", "queen", "led zeppelin", "ella fitzgerald",
               "john coltrane", "pink floyd", "adele", "the cure", "massive attack"],
    "track": ["love in vain", "paint it black", "blue in green", "let it be", "get lucky",
              "feeling good", "one love", "bohemian rhapsody", "wish you were here", "hello"],
    "playlist": ["workout mix", "chill evening", "road trip classics", "focus beats",
                 "sunday morning jazz", "party hits", "sleep sounds", "indie discoveries"],
    "music_item": ["song", "album", "track", "tune"],
    "service": ["spotify", "deezer", "youtube", "pandora", "itunes"],
    "city": ["new york", "paris", "san francisco", "berlin", "tokyo", "buenos aires",
             "cape town", "los angeles", "rome", "seattle"],
    "country": ["france", "japan", "brazil", "canada", "kenya", "italy"],
    "timeRange": ["tomorrow", "next week", "tonight", "this weekend", "in two hours", "on monday"],
    "condition_description": ["rain", "snow", "sunshine", "fog", "wind"],
    "restaurant_type": ["restaurant", "bistro", "diner", "pub", "cafe"],
    "cuisine": ["italian", "thai", "mexican", "french", "indian", "sushi"],
    "party_size_number": ["two", "four", "six", "three", "eight"],
    "object_name": ["the hobbit", "war and peace", "the great gatsby", "dune",
                    "pride and prejudice", "a brief history of time", "moby dick"],
    "object_type": ["book", "novel", "saga", "textbook"],
    "rating_value": ["one", "two", "three", "four", "five"],
    "best_rating": ["five", "ten", "six"],
    "movie_name": ["the matrix", "spirited away", "casablanca", "the godfather", "inception",
                   "star wars", "blade runner"],
    "location_name": ["grand cinema", "city multiplex", "star theatre", "riverside cinema"],
    "spatial_relation": ["nearby", "close by", "in the area"],
}

# (intent, template); {label} marks a slot, other words are O
TEMPLATES = [
    ("PlayMusic", "play {track} by {artist}"),
    ("PlayMusic", "play some {artist}"),
    ("PlayMusic", "i want to hear {artist} on {service}"),
    ("PlayMusic", "play the {music_item} {track}"),
    ("PlayMusic", "can you play {artist} 's {track}"),
    ("AddToPlaylist", "add {track} to my {playlist} playlist"),
    ("AddToPlaylist", "put this {music_item} by {artist} on {playlist}"),
    ("AddToPlaylist", "add {artist} to {playlist}"),
    ("GetWeather", "what is the weather in {city} {timeRange}"),
    ("GetWeather", "will there be {condition_description} in {city}"),
    ("GetWeather", "forecast for {country} {timeRange}"),
    ("GetWeather", "is it going to {condition_description} {timeRange}"),
    ("BookRestaurant", "book a table for {party_size_number} at a {cuisine} {restaurant_type} in {city}"),
    ("BookRestaurant", "reserve a {restaurant_type} for {party_size_number} {timeRange}"),
    ("BookRestaurant", "i need a {cuisine} {restaurant_type} {spatial_relation}"),
    ("RateBook", "rate {object_name} {rating_value} out of {best_rating}"),
    ("RateBook", "give this {object_type} {rating_value} stars"),
    ("RateBook", "i would rate {object_name} a {rating_value}"),
    ("SearchCreativeWork", "find the {object_type} {object_name}"),
    ("SearchCreativeWork", "search for {movie_name}"),
    ("SearchCreativeWork", "show me the {music_item} {track}"),
    ("SearchScreeningEvent", "when is {movie_name} playing at {location_name}"),
    ("SearchScreeningEvent", "find movie times for {movie_name} {spatial_relation}"),
    ("SearchScreeningEvent", "which cinemas {spatial_relation} show {movie_name} {timeRange}"),
]

LABELS = sorted(FILLERS)


def render(template: str, rng: Rng) -> tuple[list[str], list[str]]:
    tokens, tags = [], []
    for piece in template.split():
        if piece.startswith("{") and piece.endswith("}"):
            label = piece[1:-1]
            words = rng.choice(FILLERS[label]).split()
            tokens.extend(words)
            tags.extend([f"B-{label}"] + [f"I-{label}"] * (len(words) - 1))
        else:
            tokens.append(piece)
            tags.append("O")
    return tokens, tags


def generate(n: int, seed: int, marker: str | None = None) -> list[RawExample]:
    """``n`` utterances; ``marker`` (if given) is appended as an extra O word."""
    rng = Rng(seed).substream(7)
    out = []
    for i in range(n):
        r = rng.substream(i)
        intent, template = TEMPLATES[int(r.integers(len(TEMPLATES)))]
        tokens, tags = render(template, r)
        if marker is not None:
            tokens.append(marker)
            tags.append("O")
        out.append(RawExample(f"{i:06d}", tokens, tags, intent=intent))
    return out


def write_corpus(root: str | Path, seed: int = 0, train: int = 2000, dev: int = 300,
                 test: int = 300) -> Path:
    root = Path(root)
    for k, (name, n) in enumerate((("train", train), ("valid", dev), ("test", test))):
        write_split(root / name, generate(n, seed * 3 + k))
    return root


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out_dir")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--train", type=int, default=2000)
    ap.add_argument("--dev", type=int, default=300)
    ap.add_argument("--test", type=int, default=300)
    args = ap.parse_args(argv)
    write_corpus(args.out_dir, args.seed, args.train, args.dev, args.test)


if __name__ == "__main__":
    main()
