#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "vesselnet/image_io.hpp"
#include "vesselnet/rng.hpp"
#include "vesselnet/tensor.hpp"

namespace vesselnet {

struct Sample {
    Tensor image;               // (1, 3, h, w), values in [0, 1]
    Tensor label;               // (1, 1, h, w), strictly binary
    std::optional<Tensor> fov;  // (1, 1, h, w) when the dataset provides one
    std::string id;
    int orig_h = 0;
    int orig_w = 0;
};

enum class DatasetKind { kDrive, kStare, kCustom };

struct DatasetSpec {
    DatasetKind kind = DatasetKind::kDrive;
    int pad_h = 592;
    int pad_w = 592;

    static DatasetSpec drive() { return {DatasetKind::kDrive, 592, 592}; }
    static DatasetSpec stare() { return {DatasetKind::kStare, 704, 704}; }
    // pad_h/pad_w 0 = round each image up to the next multiple of 8
    static DatasetSpec custom() { return {DatasetKind::kCustom, 0, 0}; }

    static DatasetSpec parse(const std::string& name);
    std::string name() const;
};

struct Dataset {
    std::vector<Sample> train;
    std::vector<Sample> test;
};

// Layout: root/{training,test}/{images,labels[,fov]} with files matched by
// lexicographic order. STARE also accepts a flat root/{images,labels} layout,
// to which the first-16/last-4 split is applied; STARE never loads FOV masks.
Dataset load_dataset(const std::string& root, const DatasetSpec& spec);

// Zero padding split symmetrically, larger remainder on the bottom/right.
Tensor pad_tensor(const Tensor& t, int target_h, int target_w);
Sample pad(const Sample& s, int target_h, int target_w);
Tensor crop_back(const Tensor& padded, int orig_h, int orig_w);

// Per-pad-target padding offsets (top, left) used by pad/crop_back.
std::pair<int, int> pad_offsets(int h, int w, int target_h, int target_w);

inline int round_up8(int v) { return (v + 7) / 8 * 8; }

// Offline expansion. The 9-variant deck, in order: identity, hflip, vflip,
// rot180, rot90, rot270, gaussian noise (sigma 0.02, image only), gamma 0.8,
// gamma 1.2. multiplier selects how many variants per source image; beyond 9
// the deck continues with fresh noise draws. Rotations require square inputs.
std::vector<Sample> augment(const std::vector<Sample>& train, int multiplier, Rng rng);

// Seeded uniform sample without replacement; |val| = round(fraction * N).
std::pair<std::vector<Sample>, std::vector<Sample>> split_validation(
    std::vector<Sample> samples, double fraction, Rng rng);

// Writes <id>.png / <id>.label.png per sample plus manifest.txt with seeds
// and variant tags.
void write_augmented_cache(const std::string& dir, const std::vector<Sample>& samples,
                           std::uint64_t seed);

Tensor image_to_tensor(const ImageU8& img);              // (1, c, h, w) in [0,1]
ImageU8 tensor_to_image(const Tensor& t);                // round(255 * v)
Tensor label_to_tensor(const ImageU8& img, const std::string& origin);

}  // namespace vesselnet
