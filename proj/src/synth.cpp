#include <array>
#include <cmath>
#include <cstring>
#include <map>
#include <sstream>

#include "dfb/data.hpp"

namespace dfb::data {

// Procedural image source: each class is a fixed low-amplitude oriented
// texture template over a per-sample smooth background plus pixel noise.
// Templates are deterministic in (family, kind, class index), so train and
// test splits of one spec share class structure while samples differ.

namespace {

const std::vector<std::string> kVictimNames = {"rings",  "stripes", "checks", "dots",  "waves",
                                               "slants", "bands",   "cells",  "knots", "plaid"};

const std::vector<std::vector<std::string>> kOodNameBanks = {
    {"zigzag", "gridline", "spots", "ripple", "weave", "mottle", "crosshatch", "static"},
    {"marble", "burl", "fleck", "haze", "lattice", "swirl", "granite", "moss"},
    {"ember", "frost", "dune", "vein", "shard", "petal", "coil", "mesh"},
};

uint64_t mix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

uint64_t combine(std::initializer_list<uint64_t> parts) {
    uint64_t h = 0x51ed2701a3c5e091ULL;
    for (uint64_t p : parts) h = mix64(h ^ mix64(p));
    return h;
}

struct Grating {
    double theta, freq, phase;
    std::array<double, 3> chan;
};

struct TemplateParams {
    Grating g1, g2;
};

TemplateParams draw_template(Rng& rng) {
    TemplateParams t;
    for (Grating* g : {&t.g1, &t.g2}) {
        g->theta = rng.uniform(0.0, M_PI);
        g->freq = rng.uniform(1.5, 4.5);
        g->phase = rng.uniform(0.0, 2.0 * M_PI);
        for (auto& c : g->chan) c = rng.uniform(-1.0, 1.0);
    }
    return t;
}

// Small parameter jitter: a visually-similar but non-identical class, the
// OOD stand-in for the victim target class.
TemplateParams jitter_template(const TemplateParams& base, Rng& rng) {
    TemplateParams t = base;
    for (Grating* g : {&t.g1, &t.g2}) {
        g->theta += rng.gaussian() * 0.03;
        g->freq *= 1.0 + rng.gaussian() * 0.02;
        g->phase += rng.gaussian() * 0.10;
        for (auto& c : g->chan) c += rng.gaussian() * 0.05;
    }
    return t;
}

Tensor render_template(const TemplateParams& p, int64_t c, int64_t h, int64_t w) {
    Tensor t({c, h, w});
    const double scale = static_cast<double>(std::max(h, w));
    double max_abs = 0.0;
    for (int64_t ch = 0; ch < c; ++ch) {
        for (int64_t y = 0; y < h; ++y) {
            for (int64_t x = 0; x < w; ++x) {
                double v = 0.0;
                for (const Grating* g : {&p.g1, &p.g2}) {
                    double u = (x * std::cos(g->theta) + y * std::sin(g->theta)) / scale;
                    v += g->chan[static_cast<size_t>(ch % 3)] *
                         std::sin(2.0 * M_PI * g->freq * u + g->phase);
                }
                t[(ch * h + y) * w + x] = static_cast<float>(v);
                max_abs = std::max(max_abs, std::fabs(v));
            }
        }
    }
    if (max_abs > 0) scale_inplace(t, static_cast<float>(1.0 / max_abs));
    return t;
}

Tensor class_template(const SynthSpec& spec, int class_index, int64_t c, int64_t h, int64_t w) {
    const uint64_t kind_tag = spec.kind == "victim" ? 1 : 2;
    if (spec.kind == "pood" && !spec.cousin_of.empty() && class_index == 0) {
        Rng base_rng(combine({spec.cousin_family, 1 /*victim*/,
                              static_cast<uint64_t>(spec.cousin_class_index), 0xc1a55ULL}));
        TemplateParams base = draw_template(base_rng);
        Rng jr(combine({spec.family, kind_tag, 0xc0051eULL ^ spec.seed}));
        return render_template(jitter_template(base, jr), c, h, w);
    }
    Rng rng(combine({spec.family, kind_tag, static_cast<uint64_t>(class_index), 0xc1a55ULL}));
    return render_template(draw_template(rng), c, h, w);
}

std::vector<std::string> class_names_for(const SynthSpec& spec) {
    std::vector<std::string> names;
    if (spec.kind == "victim") {
        for (int i = 0; i < spec.classes; ++i)
            names.push_back(kVictimNames[static_cast<size_t>(i) % kVictimNames.size()]);
    } else {
        const auto& bank = kOodNameBanks[spec.family % kOodNameBanks.size()];
        int start = spec.cousin_of.empty() ? 0 : 1;
        if (start) names.push_back("wild " + spec.cousin_of);
        for (int i = start; i < spec.classes; ++i)
            names.push_back(bank[static_cast<size_t>(i - start) % bank.size()]);
    }
    return names;
}

}  // namespace

SynthSpec parse_synth_source(const std::string& source) {
    SynthSpec spec;
    std::map<std::string, std::string> kv;
    std::stringstream ss(source);
    std::string item;
    while (std::getline(ss, item, '&')) {
        if (item.empty()) continue;
        auto eq = item.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error("synth source: expected key=value, got '" + item + "'");
        kv[item.substr(0, eq)] = item.substr(eq + 1);
    }
    bool degrade_set = false;
    for (const auto& [k, v] : kv) {
        if (k == "kind") {
            spec.kind = v;
            if (v != "victim" && v != "pood")
                throw std::runtime_error("synth source: kind must be victim|pood");
        } else if (k == "classes") {
            spec.classes = std::stoi(v);
        } else if (k == "per_class") {
            spec.per_class = std::stoi(v);
        } else if (k == "test_per_class") {
            spec.test_per_class = std::stoi(v);
        } else if (k == "hw") {
            spec.height = spec.width = std::stoll(v);
        } else if (k == "channels") {
            spec.channels = std::stoll(v);
        } else if (k == "seed") {
            spec.seed = std::stoull(v);
            spec.seed_explicit = true;
        } else if (k == "family") {
            spec.family = std::stoull(v);
        } else if (k == "alpha") {
            spec.alpha = std::stod(v);
        } else if (k == "noise") {
            spec.noise = std::stod(v);
        } else if (k == "degrade") {
            spec.degrade_frac = std::stod(v);
            degrade_set = true;
        } else if (k == "cousin_of") {
            spec.cousin_of = v;
        } else if (k == "cousin_family") {
            spec.cousin_family = std::stoull(v);
        } else {
            throw std::runtime_error("synth source: unknown key '" + k + "'");
        }
    }
    if (spec.kind == "pood" && !degrade_set) spec.degrade_frac = 0.25;
    if (!spec.cousin_of.empty()) {
        auto it = std::find(kVictimNames.begin(), kVictimNames.end(), spec.cousin_of);
        if (it == kVictimNames.end())
            throw std::runtime_error("synth source: cousin_of '" + spec.cousin_of +
                                     "' is not a victim class name");
        spec.cousin_class_index = static_cast<int>(it - kVictimNames.begin());
    }
    if (spec.classes < 1 || spec.per_class < 1 || spec.height < 4 || spec.width < 4)
        throw std::runtime_error("synth source: degenerate size parameters");
    return spec;
}

LabeledDataset generate_synthetic(const SynthSpec& spec, Role role) {
    const int64_t c = spec.channels, h = spec.height, w = spec.width;
    const int per = role == Role::victim_test
                        ? (spec.test_per_class > 0 ? spec.test_per_class : std::max(1, spec.per_class / 5))
                        : spec.per_class;
    const int64_t n = static_cast<int64_t>(spec.classes) * per;
    const uint64_t role_tag = role == Role::victim_test ? 0x7e57ULL : 0x7a18ULL;

    std::vector<Tensor> templates;
    templates.reserve(static_cast<size_t>(spec.classes));
    for (int k = 0; k < spec.classes; ++k) templates.push_back(class_template(spec, k, c, h, w));

    LabeledDataset ds;
    ds.name = "synth-" + spec.kind;
    ds.role = role;
    ds.seed = spec.seed;
    ds.class_names = class_names_for(spec);
    ds.images = Tensor({n, c, h, w});
    ds.labels.resize(static_cast<size_t>(n));

    const int64_t img_n = c * h * w;
    const double scale = static_cast<double>(std::max(h, w));
    int64_t out = 0;
    for (int k = 0; k < spec.classes; ++k) {
        const Tensor& tpl = templates[static_cast<size_t>(k)];
        for (int s = 0; s < per; ++s, ++out) {
            Rng rng(combine({spec.seed, role_tag, static_cast<uint64_t>(k),
                             static_cast<uint64_t>(s)}));
            double amp = spec.alpha * rng.uniform(0.85, 1.15);
            double sigma = spec.noise;
            if (spec.degrade_frac > 0 && rng.uniform() < spec.degrade_frac) {
                amp *= 0.35;
                sigma *= 3.0;
            }
            // smooth per-sample background field
            double btheta = rng.uniform(0.0, M_PI);
            double bfreq = rng.uniform(0.4, 1.4);
            double bphase = rng.uniform(0.0, 2.0 * M_PI);
            std::array<double, 3> bamp;
            for (auto& b : bamp) b = 0.08 * rng.uniform(0.4, 1.0);
            double brightness = rng.uniform(-0.05, 0.05);

            float* px = ds.images.data() + out * img_n;
            for (int64_t ch = 0; ch < c; ++ch) {
                for (int64_t y = 0; y < h; ++y) {
                    for (int64_t x = 0; x < w; ++x) {
                        double u = (x * std::cos(btheta) + y * std::sin(btheta)) / scale;
                        double bg = bamp[static_cast<size_t>(ch % 3)] *
                                    std::sin(2.0 * M_PI * bfreq * u + bphase);
                        double v = 0.5 + brightness + bg +
                                   amp * tpl[(ch * h + y) * w + x] + sigma * rng.gaussian();
                        px[(ch * h + y) * w + x] =
                            static_cast<float>(std::min(std::max(v, 0.0), 1.0));
                    }
                }
            }
            ds.labels[static_cast<size_t>(out)] = static_cast<int32_t>(k);
        }
    }
    ds.validate();
    return ds;
}

}  // namespace dfb::data
