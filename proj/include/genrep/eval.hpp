// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "genrep/data.hpp"
#include "genrep/encoder.hpp"

namespace genrep {

// Multinomial logistic regression on frozen features, fit with damped
// Newton steps to gradient tolerance 1e-6. The L2 term makes the optimum
// unique, so training is deterministic.
struct LinearProbe {
    int classes = 0;
    int dim = 0;
    std::vector<double> w; // [classes, dim+1], last column is the bias

    std::vector<double> logits(const float* x) const;
    int predict(const float* x) const;
};

LinearProbe train_linear_probe(const std::vector<float>& features, const std::vector<int>& labels,
                               int n, int dim, int classes, double l2);

double probe_accuracy(const LinearProbe& probe, const std::vector<float>& features,
                      const std::vector<int>& labels, int n);

// Batched global-feature extraction; [n, dim] row-major.
std::vector<float> extract_cls_features(const Encoder& enc, const Dataset& ds,
                                        const std::vector<int>& indices, int chunk = 64);

struct ProbeReport {
    std::map<std::string, double> per_attribute; // fine-grained test accuracy
    double coarse = 0.0;                         // shape-class test accuracy
    double fine_mean = 0.0;
    double drift = 0.0;
    double recon_score = 0.0;
};

struct ProbeSuite {
    std::map<std::string, LinearProbe> probes; // keyed by attribute name
};

ProbeSuite train_probe_suite(const Encoder& enc, const Dataset& ds, double l2);

using ReconstructFn =
    std::function<std::vector<float>(const std::vector<float>& image, uint64_t seed)>;

// Per-attribute test accuracies, drift vs the reference snapshot, and the
// mean reconstruction score over held-out images.
ProbeReport fine_grained_eval(const Encoder& enc, const Dataset& ds, const Encoder& reference,
                              const ReconstructFn& reconstruct, double l2, int recon_images = 64);

// Two renders differing in exactly one attribute; the image whose probe
// logit for the target value is higher wins. Exact ties score half.
double paired_discrimination_eval(const Encoder& enc, const ProbeSuite& suite, Attr attribute,
                                  int n_pairs, int image_size, float noise_sigma, Rng& rng);

} // namespace genrep
