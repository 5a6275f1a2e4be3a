"""Reader for NIST CAVP ``.rsp`` AES-GCM encryption vector files."""

from pathlib import Path

DATA = Path(__file__).parent / "data"


def load_gcm_vectors(name="gcmEncryptExtIV256_subset.rsp"):
    vectors, cur = [], {}
    for line in (DATA / name).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith(("#", "[")):
            continue
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key == "Count" and cur:
            vectors.append(cur)
            cur = {}
        cur[key] = value
    if cur:
        vectors.append(cur)
    return [{k: (bytes.fromhex(v) if k != "Count" else int(v)) for k, v in d.items()}
            for d in vectors]
