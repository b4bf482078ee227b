"""
Scoring over HTTP
=================

Any scorer can be served over a small binary protocol: a JSON header with
the text tokens and answer span followed by raw float32 visual embeddings.
The client retries transient failures, so a grid run can point at a remote
model without changing anything else.
"""

from longctx.backend import RemoteScorer, ScoreRequest, ScoringServer, ToyModelConfig, ToyScorer, encode_request
from longctx.haystack import GridSpec, heatmap_csv, niah_builder, run_grid, synthetic_haystack
from longctx.rope import RopeParams

toy = ToyScorer(ToyModelConfig(rope=RopeParams(1e4, 16, 4096)))

# %% What goes over the wire
body = encode_request(ScoreRequest([5, 6, 7, 8, 9], (3, 5), request_id="demo"))
n = int.from_bytes(body[:4], "little")
print(n, body[4:4 + n].decode())

# %% Serve the toy model and score through the client
with ScoringServer(toy) as server:
    client = RemoteScorer(server.url, timeout=10, retries=2, max_in_flight=2)
    print("health:", client.health())

    req = ScoreRequest(list(range(1, 40)), (30, 37))
    print("remote:", client(req).argmax_ids)
    print("local: ", toy(req).argmax_ids)

    hay = synthetic_haystack(5000, seed=0)
    grid = run_grid(GridSpec((512, 1024), (0.0, 1.0), 2), niah_builder(hay), client, seed=0, jobs=2)
    print(heatmap_csv(grid))
    client.close()
