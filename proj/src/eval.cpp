// SPDX-License-Identifier: Apache-2.0
#include "genrep/eval.hpp"

#include <algorithm>
#include <cmath>

#include "genrep/flow.hpp"
#include "genrep/patches.hpp"

namespace genrep {

namespace {

// dense symmetric positive-definite solve, in place
void cholesky_solve(std::vector<double>& A, std::vector<double>& b, int n) {
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j <= i; ++j) {
            double s = A[static_cast<size_t>(i) * n + j];
            for (int k = 0; k < j; ++k) {
                s -= A[static_cast<size_t>(i) * n + k] * A[static_cast<size_t>(j) * n + k];
            }
            if (i == j) {
                if (s <= 0.0) {
                    throw ContractError("probe: hessian not positive definite");
                }
                A[static_cast<size_t>(i) * n + j] = std::sqrt(s);
            } else {
                A[static_cast<size_t>(i) * n + j] = s / A[static_cast<size_t>(j) * n + j];
            }
        }
    }
    for (int i = 0; i < n; ++i) {
        double s = b[static_cast<size_t>(i)];
        for (int k = 0; k < i; ++k) {
            s -= A[static_cast<size_t>(i) * n + k] * b[static_cast<size_t>(k)];
        }
        b[static_cast<size_t>(i)] = s / A[static_cast<size_t>(i) * n + i];
    }
    for (int i = n - 1; i >= 0; --i) {
        double s = b[static_cast<size_t>(i)];
        for (int k = i + 1; k < n; ++k) {
            s -= A[static_cast<size_t>(k) * n + i] * b[static_cast<size_t>(k)];
        }
        b[static_cast<size_t>(i)] = s / A[static_cast<size_t>(i) * n + i];
    }
}

double probe_objective(const std::vector<double>& w, const std::vector<float>& X,
                       const std::vector<int>& y, int n, int d1, int classes, double l2) {
    double nll = 0.0;
    std::vector<double> z(static_cast<size_t>(classes));
    for (int i = 0; i < n; ++i) {
        const float* xi = X.data() + static_cast<size_t>(i) * (d1 - 1);
        double mx = -1e300;
        for (int c = 0; c < classes; ++c) {
            double s = w[static_cast<size_t>(c) * d1 + d1 - 1];
            for (int j = 0; j < d1 - 1; ++j) {
                s += w[static_cast<size_t>(c) * d1 + j] * xi[j];
            }
            z[static_cast<size_t>(c)] = s;
            mx = std::max(mx, s);
        }
        double lse = 0.0;
        for (int c = 0; c < classes; ++c) {
            lse += std::exp(z[static_cast<size_t>(c)] - mx);
        }
        nll += mx + std::log(lse) - z[static_cast<size_t>(y[static_cast<size_t>(i)])];
    }
    double reg = 0.0;
    for (int c = 0; c < classes; ++c) {
        for (int j = 0; j < d1 - 1; ++j) {
            reg += w[static_cast<size_t>(c) * d1 + j] * w[static_cast<size_t>(c) * d1 + j];
        }
    }
    return nll + 0.5 * l2 * reg;
}

} // namespace

std::vector<double> LinearProbe::logits(const float* x) const {
    std::vector<double> z(static_cast<size_t>(classes));
    const int d1 = dim + 1;
    for (int c = 0; c < classes; ++c) {
        double s = w[static_cast<size_t>(c) * d1 + dim];
        for (int j = 0; j < dim; ++j) {
            s += w[static_cast<size_t>(c) * d1 + j] * x[j];
        }
        z[static_cast<size_t>(c)] = s;
    }
    return z;
}

int LinearProbe::predict(const float* x) const {
    std::vector<double> z = logits(x);
    int best = 0;
    for (int c = 1; c < classes; ++c) {
        if (z[static_cast<size_t>(c)] > z[static_cast<size_t>(best)]) {
            best = c;
        }
    }
    return best;
}

LinearProbe train_linear_probe(const std::vector<float>& features, const std::vector<int>& labels,
                               int n, int dim, int classes, double l2) {
    if (n < classes) {
        throw ContractError("probe: need at least as many samples as classes");
    }
    if (l2 <= 0.0) {
        throw ConfigError("probe: l2 must be positive");
    }
    int distinct = 0;
    {
        std::vector<uint8_t> seen(static_cast<size_t>(classes), 0);
        for (int i = 0; i < n; ++i) {
            const int y = labels[static_cast<size_t>(i)];
            if (y < 0 || y >= classes) {
                throw ContractError("probe: label out of range");
            }
            if (seen[static_cast<size_t>(y)] == 0) {
                seen[static_cast<size_t>(y)] = 1;
                ++distinct;
            }
        }
    }
    if (distinct < 2) {
        throw ContractError("probe: degenerate labels (single class)");
    }

    const int d1 = dim + 1;
    const int P = classes * d1;
    LinearProbe probe;
    probe.classes = classes;
    probe.dim = dim;
    probe.w.assign(static_cast<size_t>(P), 0.0);

    std::vector<double> probs(static_cast<size_t>(n) * classes);
    std::vector<double> grad(static_cast<size_t>(P));
    std::vector<double> H;
    double prev_obj = probe_objective(probe.w, features, labels, n, d1, classes, l2);
    for (int iter = 0; iter < 100; ++iter) {
        // softmax probabilities
        for (int i = 0; i < n; ++i) {
            const float* xi = features.data() + static_cast<size_t>(i) * dim;
            std::vector<double> z = LinearProbe{classes, dim, probe.w}.logits(xi);
            double mx = z[0];
            for (double v : z) {
                mx = std::max(mx, v);
            }
            double denom = 0.0;
            for (int c = 0; c < classes; ++c) {
                probs[static_cast<size_t>(i) * classes + c] = std::exp(z[static_cast<size_t>(c)] - mx);
                denom += probs[static_cast<size_t>(i) * classes + c];
            }
            for (int c = 0; c < classes; ++c) {
                probs[static_cast<size_t>(i) * classes + c] /= denom;
            }
        }
        // gradient
        std::fill(grad.begin(), grad.end(), 0.0);
        for (int i = 0; i < n; ++i) {
            const float* xi = features.data() + static_cast<size_t>(i) * dim;
            for (int c = 0; c < classes; ++c) {
                const double e = probs[static_cast<size_t>(i) * classes + c] -
                                 (labels[static_cast<size_t>(i)] == c ? 1.0 : 0.0);
                double* gc = grad.data() + static_cast<size_t>(c) * d1;
                for (int j = 0; j < dim; ++j) {
                    gc[j] += e * xi[j];
                }
                gc[dim] += e;
            }
        }
        double gmax = 0.0;
        for (int c = 0; c < classes; ++c) {
            for (int j = 0; j < d1; ++j) {
                if (j < dim) {
                    grad[static_cast<size_t>(c) * d1 + j] += l2 * probe.w[static_cast<size_t>(c) * d1 + j];
                }
                gmax = std::max(gmax, std::abs(grad[static_cast<size_t>(c) * d1 + j]));
            }
        }
        if (gmax < 1e-6) {
            break;
        }
        // Newton direction from the full multinomial hessian
        H.assign(static_cast<size_t>(P) * P, 0.0);
        for (int i = 0; i < n; ++i) {
            const float* xi = features.data() + static_cast<size_t>(i) * dim;
            const double* pi = probs.data() + static_cast<size_t>(i) * classes;
            for (int c = 0; c < classes; ++c) {
                for (int cc = c; cc < classes; ++cc) {
                    const double coef = pi[c] * ((c == cc ? 1.0 : 0.0) - pi[cc]);
                    if (coef == 0.0) {
                        continue;
                    }
                    double* Hc = H.data() + (static_cast<size_t>(c) * d1) * P +
                                 static_cast<size_t>(cc) * d1;
                    for (int j = 0; j < d1; ++j) {
                        const double xj = j < dim ? xi[j] : 1.0;
                        double* row = Hc + static_cast<size_t>(j) * P;
                        for (int k = 0; k < d1; ++k) {
                            const double xk = k < dim ? xi[k] : 1.0;
                            row[k] += coef * xj * xk;
                        }
                    }
                }
            }
        }
        // mirror the upper blocks and add the ridge
        for (int c = 0; c < classes; ++c) {
            for (int cc = 0; cc < c; ++cc) {
                for (int j = 0; j < d1; ++j) {
                    for (int k = 0; k < d1; ++k) {
                        H[(static_cast<size_t>(c) * d1 + j) * P + static_cast<size_t>(cc) * d1 + k] =
                            H[(static_cast<size_t>(cc) * d1 + k) * P + static_cast<size_t>(c) * d1 + j];
                    }
                }
            }
        }
        for (int c = 0; c < classes; ++c) {
            for (int j = 0; j < d1; ++j) {
                const size_t diag = static_cast<size_t>(c) * d1 + j;
                H[diag * P + diag] += (j < dim ? l2 : 1e-9);
            }
        }
        std::vector<double> step = grad;
        cholesky_solve(H, step, P);
        // damped update
        double alpha = 1.0;
        bool moved = false;
        for (int ls = 0; ls < 30; ++ls) {
            std::vector<double> cand = probe.w;
            for (int p = 0; p < P; ++p) {
                cand[static_cast<size_t>(p)] -= alpha * step[static_cast<size_t>(p)];
            }
            const double obj = probe_objective(cand, features, labels, n, d1, classes, l2);
            if (obj <= prev_obj) {
                probe.w = std::move(cand);
                prev_obj = obj;
                moved = true;
                break;
            }
            alpha *= 0.5;
        }
        if (!moved) {
            break;
        }
    }
    return probe;
}

double probe_accuracy(const LinearProbe& probe, const std::vector<float>& features,
                      const std::vector<int>& labels, int n) {
    int hits = 0;
    for (int i = 0; i < n; ++i) {
        hits += probe.predict(features.data() + static_cast<size_t>(i) * probe.dim) ==
                        labels[static_cast<size_t>(i)]
                    ? 1
                    : 0;
    }
    return n > 0 ? static_cast<double>(hits) / n : 0.0;
}

std::vector<float> extract_cls_features(const Encoder& enc, const Dataset& ds,
                                        const std::vector<int>& indices, int chunk) {
    NoGradGuard ng;
    const int dim = enc.cfg.dim;
    const int L = enc.cfg.local_tokens();
    const int pd = enc.cfg.patch_dim();
    std::vector<float> out(indices.size() * static_cast<size_t>(dim));
    for (size_t start = 0; start < indices.size(); start += static_cast<size_t>(chunk)) {
        const int B = static_cast<int>(std::min(static_cast<size_t>(chunk),
                                                indices.size() - start));
        std::vector<float> patches(static_cast<size_t>(B) * L * pd);
        for (int b = 0; b < B; ++b) {
            const LabeledImage& it =
                ds.items[static_cast<size_t>(indices[start + static_cast<size_t>(b)])];
            std::vector<float> p = encoder_input_patches(it.image, enc.cfg);
            std::copy(p.begin(), p.end(), patches.begin() + static_cast<size_t>(b) * L * pd);
        }
        Tensor tokens = enc.forward_tokens(Tensor::from_data({B, L, pd}, std::move(patches)), {});
        const float* pt = tokens.data();
        for (int b = 0; b < B; ++b) {
            std::copy(pt + static_cast<size_t>(b) * (L + 1) * dim,
                      pt + static_cast<size_t>(b) * (L + 1) * dim + dim,
                      out.begin() + (start + static_cast<size_t>(b)) * dim);
        }
    }
    return out;
}

ProbeSuite train_probe_suite(const Encoder& enc, const Dataset& ds, double l2) {
    ProbeSuite suite;
    const std::vector<int> train_idx = ds.split_indices(0);
    std::vector<float> feats = extract_cls_features(enc, ds, train_idx);
    const int n = static_cast<int>(train_idx.size());
    auto train_for = [&](Attr a) {
        std::vector<int> y(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) {
            y[static_cast<size_t>(i)] =
                attribute_value(ds.items[static_cast<size_t>(train_idx[static_cast<size_t>(i)])].spec, a);
        }
        suite.probes[attribute_name(a)] =
            train_linear_probe(feats, y, n, enc.cfg.dim, attribute_cardinality(a), l2);
    };
    train_for(Attr::shape);
    for (Attr a : kFineAttrs) {
        train_for(a);
    }
    return suite;
}

ProbeReport fine_grained_eval(const Encoder& enc, const Dataset& ds, const Encoder& reference,
                              const ReconstructFn& reconstruct, double l2, int recon_images) {
    ProbeSuite suite = train_probe_suite(enc, ds, l2);
    const std::vector<int> test_idx = ds.split_indices(2);
    std::vector<float> feats = extract_cls_features(enc, ds, test_idx);
    const int n = static_cast<int>(test_idx.size());

    ProbeReport rep;
    auto acc_for = [&](Attr a) {
        std::vector<int> y(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) {
            y[static_cast<size_t>(i)] =
                attribute_value(ds.items[static_cast<size_t>(test_idx[static_cast<size_t>(i)])].spec, a);
        }
        return probe_accuracy(suite.probes[attribute_name(a)], feats, y, n);
    };
    rep.coarse = acc_for(Attr::shape);
    double fine_total = 0.0;
    for (Attr a : kFineAttrs) {
        const double acc = acc_for(a);
        rep.per_attribute[attribute_name(a)] = acc;
        fine_total += acc;
    }
    rep.fine_mean = fine_total / static_cast<double>(kFineAttrs.size());

    const std::vector<int> val_idx = ds.split_indices(1);
    std::vector<std::vector<float>> probe_imgs;
    for (size_t i = 0; i < val_idx.size() && i < 64; ++i) {
        probe_imgs.push_back(ds.items[static_cast<size_t>(val_idx[i])].image);
    }
    rep.drift = feature_drift(enc, reference, probe_imgs);

    if (reconstruct) {
        double total = 0.0;
        int count = 0;
        for (int i = 0; i < recon_images && i < static_cast<int>(val_idx.size()); ++i) {
            const LabeledImage& it = ds.items[static_cast<size_t>(val_idx[static_cast<size_t>(i)])];
            std::vector<float> rec = reconstruct(it.image, it.spec.seed);
            total += reconstruction_score(rec, it.image, reference);
            ++count;
        }
        rep.recon_score = count > 0 ? total / count : 0.0;
    }
    return rep;
}

double paired_discrimination_eval(const Encoder& enc, const ProbeSuite& suite, Attr attribute,
                                  int n_pairs, int image_size, float noise_sigma, Rng& rng) {
    auto it = suite.probes.find(attribute_name(attribute));
    if (it == suite.probes.end()) {
        throw ContractError("paired eval: no trained probe for attribute");
    }
    const LinearProbe& probe = it->second;
    const int card = attribute_cardinality(attribute);
    double score = 0.0;
    for (int p = 0; p < n_pairs; ++p) {
        SceneSpec spec;
        spec.shape_class = rng.uniform_int(4);
        spec.color = rng.uniform_int(6);
        spec.count = 1 + rng.uniform_int(4);
        spec.orientation = rng.uniform_int(4);
        spec.position = rng.uniform_int(4);
        spec.size_class = rng.uniform_int(2);
        spec.noise_sigma = noise_sigma;
        spec.seed = rng.next_u64();
        const int va = attribute_value(spec, attribute);
        int vb = rng.uniform_int(card - 1);
        if (vb >= va) {
            ++vb;
        }
        SceneSpec spec_b = spec;
        set_attribute_value(spec_b, attribute, vb);

        NoGradGuard ng;
        TokenBundle ba = enc.encode(render_scene(spec, image_size));
        TokenBundle bb = enc.encode(render_scene(spec_b, image_size));
        const double la = probe.logits(ba.cls.data())[static_cast<size_t>(va)];
        const double lb = probe.logits(bb.cls.data())[static_cast<size_t>(va)];
        if (la == lb) {
            score += 0.5;
        } else if (la > lb) {
            score += 1.0;
        }
    }
    return n_pairs > 0 ? score / n_pairs : 0.0;
}

} // namespace genrep
