"""
PSNR and SSIM on a toy image
============================

A few sanity checks on the two quality metrics the pruning gate uses.
"""

import numpy as np

from prunekit import quality

rng = np.random.default_rng(0)
img = rng.uniform(0.2, 0.8, size=(1, 32, 32))

# a constant offset of 16 grey levels on an 8-bit scale: MSE = 256
print("offset 16/255:", round(quality.psnr(img * 255, img * 255 + 16, peak=255), 3), "dB")
print("identical:", quality.psnr(img, img), quality.ssim(img, img))

# PSNR falls as the noise grows; SSIM too
for sigma in (0.01, 0.05, 0.1, 0.2):
    noisy = np.clip(img + sigma * rng.standard_normal(img.shape), 0, 1)
    print(f"sigma={sigma:<5} psnr={quality.psnr(noisy, img):6.2f}  ssim={quality.ssim(noisy, img):.3f}")

# inverting an image keeps the structure but flips its sign
print("ssim vs inverted:", round(quality.ssim(img, 1 - img), 3))
