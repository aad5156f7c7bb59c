"""JSON-lines worker that serves a pre-trained T5 checkpoint to the `dst` tool.

One request per stdin line, one response per stdout line. Every response
carries `ok`; failures carry `error`.
"""
import json
import sys


def emit(obj):
    sys.stdout.write(json.dumps(obj) + "\n")
    sys.stdout.flush()


def main():
    args = sys.argv[1:]
    model_dir = args[args.index("--model-dir") + 1]
    max_source = int(args[args.index("--max-source-length") + 1])
    lr = float(args[args.index("--learning-rate") + 1])
    weight_decay = float(args[args.index("--weight-decay") + 1])
    seed = int(args[args.index("--seed") + 1])
    try:
        import torch
        from transformers import AutoTokenizer, T5ForConditionalGeneration
    except Exception as exc:  # noqa: BLE001
        emit({"ok": False, "error": f"python runtime lacks torch/transformers: {exc}"})
        return
    try:
        torch.manual_seed(seed)
        tokenizer = AutoTokenizer.from_pretrained(model_dir)
        model = T5ForConditionalGeneration.from_pretrained(model_dir)
    except Exception as exc:  # noqa: BLE001
        emit({"ok": False, "error": f"cannot load weights from {model_dir}: {exc}"})
        return
    device = "cuda" if torch.cuda.is_available() else "cpu"
    model.to(device)
    optimizer = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)

    def batch_loss(sources, targets):
        enc = tokenizer(sources, padding=True, truncation=True, max_length=max_source, return_tensors="pt").to(device)
        labels = tokenizer(targets, padding=True, return_tensors="pt").input_ids.to(device)
        labels[labels == tokenizer.pad_token_id] = -100
        return model(**enc, labels=labels).loss

    emit({"ok": True, "device": device})
    for line in sys.stdin:
        try:
            req = json.loads(line)
            op = req["op"]
            if op == "count":
                emit({"ok": True, "count": len(tokenizer(req["text"]).input_ids)})
            elif op == "loss":
                model.eval()
                with torch.no_grad():
                    loss = batch_loss(req["sources"], req["targets"])
                emit({"ok": True, "loss": loss.item()})
            elif op == "train_step":
                model.train()
                optimizer.zero_grad()
                loss = batch_loss(req["sources"], req["targets"])
                loss.backward()
                optimizer.step()
                emit({"ok": True, "loss": loss.item()})
            elif op == "generate":
                model.eval()
                enc = tokenizer([req["source"]], truncation=True, max_length=max_source, return_tensors="pt").to(device)
                with torch.no_grad():
                    out = model.generate(**enc, max_new_tokens=req["max_length"], num_beams=1, do_sample=False)
                emit({"ok": True, "text": tokenizer.decode(out[0], skip_special_tokens=True).strip()})
            elif op == "save":
                model.save_pretrained(req["path"])
                tokenizer.save_pretrained(req["path"])
                emit({"ok": True})
            else:
                emit({"ok": False, "error": f"unknown op {op}"})
        except Exception as exc:  # noqa: BLE001
            emit({"ok": False, "error": str(exc)})


if __name__ == "__main__":
    main()
