"""Split mixed Khmer/Latin text into clusters and round-trip it through a vocabulary."""

from uktr import build_vocab, decode, encode, segment

lines = ["ក្រុមហ៊ុន ABC ២០២៤", "ស្ត្រី​និង​បុរស", "ាorphan mark first"]

for line in lines:
    parts = segment(line)
    print(repr(line))
    print("  clusters:", " | ".join(f"{c.text}<{c.kind.value}>" for c in parts))

vocab = build_vocab(lines)
ids = encode(lines[0], vocab)
print("vocab size", len(vocab))
print("ids", ids)
assert decode(ids, vocab) == lines[0]
print("round trip ok")
