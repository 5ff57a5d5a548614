"""Protocol test worker. Behaviour is chosen by argv[1]."""
import json
import sys
import time

mode = sys.argv[1] if len(sys.argv) > 1 else "echo"


def reply(obj):
    sys.stdout.write(json.dumps(obj) + "\n")
    sys.stdout.flush()


hello = json.loads(sys.stdin.readline())
if mode == "noready":
    reply({"ready": False})
    sys.exit(0)
digest = hello["hello"]["space_digest"]
reply({"ready": True})

for line in sys.stdin:
    req = json.loads(line)
    x1 = req["params"].get("x1", 0.0)
    if mode == "hang" and x1 > 0.5:
        time.sleep(30)
    if mode == "crash" and x1 > 0.5:
        sys.exit(3)
    if mode == "badid":
        reply({"id": req["id"] + 1, "ok": True, "y": 0.0})
    elif mode == "garbage":
        reply("not an object")
    elif req["algorithm"] == "algoC":
        reply({"id": req["id"], "ok": False, "error": "unknown algorithm"})
    else:
        reply({"id": req["id"], "ok": True, "y": x1, "aux": {"digest": digest, "n": len(req["params"])}})
