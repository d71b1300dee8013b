"""Export torchvision's ImageNet ResNet34 weights to safetensors for the
transfer preset.

    python scripts/export_resnet34.py weights/resnet34.safetensors
"""
import sys
from pathlib import Path

import torch
from safetensors.torch import save_file
from torchvision.models import ResNet34_Weights, resnet34


def main():
    out = Path(sys.argv[1] if len(sys.argv) > 1 else "weights/resnet34.safetensors")
    model = resnet34(weights=ResNet34_Weights.IMAGENET1K_V1)
    state = {
        k: v.detach().to(torch.float32).contiguous()
        for k, v in model.state_dict().items()
        if not k.startswith("fc.") and not k.endswith("num_batches_tracked")
    }
    out.parent.mkdir(parents=True, exist_ok=True)
    save_file(state, str(out))
    print(f"{len(state)} tensors -> {out}")


if __name__ == "__main__":
    main()
