#include "retclip/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace retclip::data {

namespace {

const char* kConditionLexicon[] = {"microaneurysms", "hemorrhage", "exudates",
                                   "drusen",         "edema",      "cupping",
                                   "tortuosity",     "scar",       "atrophy",
                                   "neovascularization"};
constexpr int kLexiconSize = 10;

std::string condition_word(int k) {
    if (k < kLexiconSize) return kConditionLexicon[k];
    return "lesion" + std::to_string(k);
}

void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
    const double c = v * s;
    const double hp = h * 6.0;
    const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
    double r1 = 0, g1 = 0, b1 = 0;
    if (hp < 1)      { r1 = c; g1 = x; }
    else if (hp < 2) { r1 = x; g1 = c; }
    else if (hp < 3) { g1 = c; b1 = x; }
    else if (hp < 4) { g1 = x; b1 = c; }
    else if (hp < 5) { r1 = x; b1 = c; }
    else             { r1 = c; b1 = x; }
    const double m = v - c;
    r = r1 + m;
    g = g1 + m;
    b = b1 + m;
}

std::vector<std::string> eye_segments(const std::string& marker,
                                      const std::vector<int>& conditions) {
    std::vector<std::string> segs;
    if (conditions.empty()) {
        segs.push_back(marker + " normal");
    } else {
        for (int k : conditions) segs.push_back(marker + " " + condition_word(k));
    }
    return segs;
}

}  // namespace

// ---- Vocabulary ----------------------------------------------------------

Vocabulary Vocabulary::from_words(std::vector<std::string> words) {
    if (words.size() < 3) {
        throw ConfigError("vocabulary must include the three reserved tokens");
    }
    Vocabulary v;
    v.words = std::move(words);
    for (std::size_t i = 0; i < v.words.size(); ++i) {
        v.index.emplace(v.words[i], static_cast<int>(i));
    }
    return v;
}

Vocabulary Vocabulary::synthetic(int n_conditions) {
    std::vector<std::string> words{"<cls>", "<pad>", "<unk>", "left:", "right:", "normal"};
    for (int k = 0; k < n_conditions; ++k) words.push_back(condition_word(k));
    return from_words(std::move(words));
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open vocabulary: " + path.string());
    }
    std::vector<std::string> words;
    std::string line;
    while (std::getline(in, line)) words.push_back(line);
    return from_words(std::move(words));
}

void Vocabulary::save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot write vocabulary: " + path.string());
    }
    for (const std::string& w : words) out << w << '\n';
}

int Vocabulary::id(const std::string& word) const {
    auto it = index.find(word);
    return it == index.end() ? kUnk : it->second;
}

std::vector<int> tokenize(const Vocabulary& vocab, const std::string& text, Index pad_to) {
    std::vector<int> ids{Vocabulary::kCls};
    std::istringstream stream(text);
    std::string word;
    while (stream >> word) ids.push_back(vocab.id(word));
    if (pad_to > 0) {
        const std::size_t keep = static_cast<std::size_t>(pad_to) - 1;
        if (ids.size() > keep) ids.resize(keep);
        ids.resize(static_cast<std::size_t>(pad_to), Vocabulary::kPad);
    }
    return ids;
}

std::string detokenize(const Vocabulary& vocab, std::span<const int> ids) {
    std::string out;
    for (int id : ids) {
        if (id == Vocabulary::kCls || id == Vocabulary::kPad) continue;
        if (id < 0 || id >= vocab.size()) {
            throw VocabError("detokenize: id " + std::to_string(id) +
                             " outside vocabulary of size " + std::to_string(vocab.size()));
        }
        if (!out.empty()) out += ' ';
        out += vocab.words[static_cast<std::size_t>(id)];
    }
    return out;
}

// ---- synthetic cohort ------------------------------------------------------

void SyntheticCohortConfig::validate() const {
    if (n_patients < 0 || image_size <= 0) {
        throw ConfigError("cohort: n_patients/image_size must be non-negative/positive");
    }
    if (n_conditions < 2) {
        throw ConfigError("cohort: n_conditions must be at least 2");
    }
    if (condition_prior < 0.0 || condition_prior > 1.0) {
        throw ConfigError("cohort: condition_prior must lie in [0, 1]");
    }
    if (noise_std < 0.0) {
        throw ConfigError("cohort: noise_std must be non-negative");
    }
}

Image render_eye_clean(const SyntheticCohortConfig& cfg, const std::vector<int>& conditions) {
    const Index s = cfg.image_size;
    Image img = Image::zero(s, s);
    const double cx = 0.5 * static_cast<double>(s - 1);
    const double cy = cx;
    const double fundus_r = 0.48 * static_cast<double>(s);
    // fundus disc with a mild vignette on a dark border
    for (Index y = 0; y < s; ++y) {
        for (Index x = 0; x < s; ++x) {
            const double dx = static_cast<double>(x) - cx;
            const double dy = static_cast<double>(y) - cy;
            const double dist = std::sqrt(dx * dx + dy * dy);
            if (dist <= fundus_r) {
                const double fall = 1.0 - 0.5 * (dist / fundus_r) * (dist / fundus_r);
                img.channels[0](y, x) = 0.42 * fall;
                img.channels[1](y, x) = 0.24 * fall;
                img.channels[2](y, x) = 0.10 * fall;
            } else {
                img.channels[0](y, x) = 0.03;
                img.channels[1](y, x) = 0.03;
                img.channels[2](y, x) = 0.03;
            }
        }
    }
    // one disk per condition at a class-specific position and color
    const double two_pi = 2.0 * std::acos(-1.0);
    for (int k : conditions) {
        const double theta = two_pi * static_cast<double>(k) /
                                 static_cast<double>(cfg.n_conditions) -
                             0.5 * std::acos(-1.0);
        const double kx = cx + 0.28 * static_cast<double>(s) * std::cos(theta);
        const double ky = cy + 0.28 * static_cast<double>(s) * std::sin(theta);
        const double disk_r = 0.13 * static_cast<double>(s);
        double r, g, b;
        hsv_to_rgb(static_cast<double>(k) / static_cast<double>(cfg.n_conditions), 0.9, 0.95,
                   r, g, b);
        for (Index y = 0; y < s; ++y) {
            for (Index x = 0; x < s; ++x) {
                const double dx = static_cast<double>(x) - kx;
                const double dy = static_cast<double>(y) - ky;
                if (dx * dx + dy * dy <= disk_r * disk_r) {
                    img.channels[0](y, x) = r;
                    img.channels[1](y, x) = g;
                    img.channels[2](y, x) = b;
                }
            }
        }
    }
    return img;
}

namespace {

Image add_pixel_noise(const Image& img, double std_dev, std::mt19937_64& rng) {
    if (std_dev == 0.0) return img;
    std::normal_distribution<double> dist(0.0, std_dev);
    Image out = img;
    for (auto& ch : out.channels) {
        for (Index y = 0; y < out.height; ++y) {
            for (Index x = 0; x < out.width; ++x) {
                ch(y, x) = std::clamp(ch(y, x) + dist(rng), 0.0, 1.0);
            }
        }
    }
    return out;
}

std::vector<int> draw_conditions(const SyntheticCohortConfig& cfg, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<int> conds;
    for (int k = 0; k < cfg.n_conditions; ++k) {
        if (u(rng) < cfg.condition_prior) conds.push_back(k);
    }
    return conds;
}

std::string build_report(const SyntheticCohortConfig& cfg, const std::vector<int>& left,
                         const std::vector<int>& right) {
    std::vector<std::string> l = eye_segments("left:", left);
    std::vector<std::string> r = eye_segments("right:", right);
    std::vector<std::string> segs;
    if (cfg.template_mix) {
        const std::size_t n = std::max(l.size(), r.size());
        for (std::size_t i = 0; i < n; ++i) {
            if (i < l.size()) segs.push_back(l[i]);
            if (i < r.size()) segs.push_back(r[i]);
        }
    } else {
        segs = l;
        segs.insert(segs.end(), r.begin(), r.end());
    }
    std::string text;
    for (std::size_t i = 0; i < segs.size(); ++i) {
        if (i) text += ' ';
        text += segs[i];
    }
    return text;
}

}  // namespace

std::vector<PatientTriplet> generate_cohort(const SyntheticCohortConfig& cfg) {
    cfg.validate();
    Vocabulary vocab = Vocabulary::synthetic(cfg.n_conditions);
    std::vector<PatientTriplet> cohort;
    cohort.reserve(static_cast<std::size_t>(cfg.n_patients));
    for (int i = 0; i < cfg.n_patients; ++i) {
        // per-patient stream: cohort_seed xor patient index
        std::mt19937_64 rng(cfg.seed ^ static_cast<std::uint64_t>(i));
        PatientTriplet p;
        char buf[16];
        std::snprintf(buf, sizeof(buf), "p%04d", i);
        p.patient_id = buf;
        p.ground_truth[0] = draw_conditions(cfg, rng);
        p.ground_truth[1] = draw_conditions(cfg, rng);
        p.left_image = add_pixel_noise(render_eye_clean(cfg, p.ground_truth[0]),
                                       cfg.noise_std, rng);
        p.right_image = add_pixel_noise(render_eye_clean(cfg, p.ground_truth[1]),
                                        cfg.noise_std, rng);
        p.report_text = build_report(cfg, p.ground_truth[0], p.ground_truth[1]);
        p.report_tokens = tokenize(vocab, p.report_text);
        cohort.push_back(std::move(p));
    }
    return cohort;
}

// ---- augmentation -----------------------------------------------------

void AugmentConfig::validate() const {
    if (!(crop_lo > 0.0) || crop_lo > crop_hi || crop_hi > 1.0) {
        throw ConfigError("augment: need 0 < crop_lo <= crop_hi <= 1");
    }
    if (hflip_prob < 0.0 || hflip_prob > 1.0) {
        throw ConfigError("augment: hflip_prob must lie in [0, 1]");
    }
    if (out_size <= 0) {
        throw ConfigError("augment: out_size must be positive");
    }
    for (double s : norm_std) {
        if (s == 0.0) throw ConfigError("augment: norm_std must be nonzero");
    }
}

Image resize_bilinear(const Image& img, Index out_h, Index out_w) {
    if (img.height == out_h && img.width == out_w) return img;
    Image out = Image::zero(out_h, out_w);
    const double sy = static_cast<double>(img.height) / static_cast<double>(out_h);
    const double sx = static_cast<double>(img.width) / static_cast<double>(out_w);
    for (int c = 0; c < 3; ++c) {
        for (Index y = 0; y < out_h; ++y) {
            double fy = (static_cast<double>(y) + 0.5) * sy - 0.5;
            fy = std::clamp(fy, 0.0, static_cast<double>(img.height - 1));
            const Index y0 = static_cast<Index>(fy);
            const Index y1 = std::min(y0 + 1, img.height - 1);
            const double wy = fy - static_cast<double>(y0);
            for (Index x = 0; x < out_w; ++x) {
                double fx = (static_cast<double>(x) + 0.5) * sx - 0.5;
                fx = std::clamp(fx, 0.0, static_cast<double>(img.width - 1));
                const Index x0 = static_cast<Index>(fx);
                const Index x1 = std::min(x0 + 1, img.width - 1);
                const double wx = fx - static_cast<double>(x0);
                const double top = (1.0 - wx) * img.channels[c](y0, x0) +
                                   wx * img.channels[c](y0, x1);
                const double bot = (1.0 - wx) * img.channels[c](y1, x0) +
                                   wx * img.channels[c](y1, x1);
                out.channels[c](y, x) = (1.0 - wy) * top + wy * bot;
            }
        }
    }
    return out;
}

Image hflip(const Image& img) {
    Image out = img;
    for (auto& ch : out.channels) ch = ch.rowwise().reverse().eval();
    return out;
}

Image normalize(const Image& img, const std::array<double, 3>& mean,
                const std::array<double, 3>& std_dev) {
    Image out = img;
    for (int c = 0; c < 3; ++c) {
        out.channels[c] = (out.channels[c].array() - mean[c]) / std_dev[c];
    }
    return out;
}

namespace {

Image crop(const Image& img, Index y0, Index x0, Index side) {
    Image out = Image::zero(side, side);
    for (int c = 0; c < 3; ++c) {
        out.channels[c] = img.channels[c].block(y0, x0, side, side);
    }
    return out;
}

Matrix luminance(const Image& img) {
    return 0.299 * img.channels[0] + 0.587 * img.channels[1] + 0.114 * img.channels[2];
}

}  // namespace

Image augment(const Image& img, const AugmentConfig& cfg, std::mt19937_64& rng) {
    cfg.validate();
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::uniform_real_distribution<double> sym(-1.0, 1.0);

    // random area crop
    const double area = cfg.crop_lo + (cfg.crop_hi - cfg.crop_lo) * unit(rng);
    const Index bound = std::min(img.height, img.width);
    const Index side = static_cast<Index>(
        std::lround(std::sqrt(area) * static_cast<double>(bound)));
    Image working;
    if (side < 1 || side > bound) {
        working = img;  // degenerate window: fall back to the full image
    } else {
        const Index ymax = img.height - side;
        const Index xmax = img.width - side;
        const Index y0 = ymax > 0 ? static_cast<Index>(rng() % static_cast<std::uint64_t>(
                                        ymax + 1))
                                  : 0;
        const Index x0 = xmax > 0 ? static_cast<Index>(rng() % static_cast<std::uint64_t>(
                                        xmax + 1))
                                  : 0;
        working = crop(img, y0, x0, side);
    }
    working = resize_bilinear(working, cfg.out_size, cfg.out_size);

    if (unit(rng) < cfg.hflip_prob) working = hflip(working);

    // channel-wise affine jitter, clamped back into [0, 1]; a factor of
    // exactly 1 is skipped so zero-strength jitter stays bit-exact
    const double fb = 1.0 + sym(rng) * cfg.brightness;
    const double fc = 1.0 + sym(rng) * cfg.contrast;
    const double fs = 1.0 + sym(rng) * cfg.saturation;
    if (fb != 1.0) {
        for (auto& ch : working.channels) ch *= fb;
    }
    if (fc != 1.0) {
        const double mean_lum = luminance(working).mean();
        for (auto& ch : working.channels) {
            ch = ((ch.array() - mean_lum) * fc + mean_lum).matrix();
        }
    }
    if (fs != 1.0) {
        Matrix lum = luminance(working);
        for (auto& ch : working.channels) {
            ch = (lum.array() + (ch - lum).array() * fs).matrix();
        }
    }
    if (fb != 1.0 || fc != 1.0 || fs != 1.0) {
        for (auto& ch : working.channels) {
            ch = ch.array().min(1.0).max(0.0).matrix();
        }
    }
    return normalize(working, cfg.norm_mean, cfg.norm_std);
}

Image prepare_eval_image(const Image& img, Index out_size, const std::array<double, 3>& mean,
                         const std::array<double, 3>& std_dev) {
    return normalize(resize_bilinear(img, out_size, out_size), mean, std_dev);
}

// ---- manifest I/O -----------------------------------------------------

std::vector<PatientTriplet> load_manifest(const std::filesystem::path& manifest_path,
                                          const Vocabulary& vocab) {
    std::ifstream in(manifest_path);
    if (!in) {
        throw IoError("cannot open manifest: " + manifest_path.string());
    }
    const std::filesystem::path base = manifest_path.parent_path();
    std::vector<PatientTriplet> out;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::size_t start = 0;
        while (true) {
            std::size_t tab = line.find('\t', start);
            if (tab == std::string::npos) {
                fields.push_back(line.substr(start));
                break;
            }
            fields.push_back(line.substr(start, tab - start));
            start = tab + 1;
        }
        if (fields.size() != 4) {
            throw ParseError("manifest line " + std::to_string(line_no) + ": expected 4 " +
                             "tab-separated fields, got " + std::to_string(fields.size()));
        }
        PatientTriplet p;
        p.patient_id = fields[0];
        for (int eye = 0; eye < 2; ++eye) {
            const std::filesystem::path img_path = base / fields[static_cast<std::size_t>(
                                                               1 + eye)];
            if (!std::filesystem::exists(img_path)) {
                throw IoError("patient " + p.patient_id + ": missing image file " +
                              img_path.string());
            }
            (eye == 0 ? p.left_image : p.right_image) = read_png(img_path);
        }
        p.report_text = fields[3];
        p.report_tokens = tokenize(vocab, p.report_text);
        out.push_back(std::move(p));
    }
    return out;
}

void write_cohort(const std::filesystem::path& out_dir,
                  std::span<const PatientTriplet> cohort, const Vocabulary& vocab,
                  int n_conditions) {
    std::filesystem::create_directories(out_dir / "images");
    std::ofstream manifest(out_dir / "manifest.tsv");
    std::ofstream labels(out_dir / "labels.tsv");
    if (!manifest || !labels) {
        throw IoError("cannot write into " + out_dir.string());
    }
    labels << "#task=multilabel n_classes=" << n_conditions << '\n';
    for (const PatientTriplet& p : cohort) {
        const std::string left_rel = "images/" + p.patient_id + "_L.png";
        const std::string right_rel = "images/" + p.patient_id + "_R.png";
        write_png(out_dir / left_rel, p.left_image);
        write_png(out_dir / right_rel, p.right_image);
        manifest << p.patient_id << '\t' << left_rel << '\t' << right_rel << '\t'
                 << p.report_text << '\n';
        for (int eye = 0; eye < 2; ++eye) {
            labels << (eye == 0 ? left_rel : right_rel) << '\t';
            const auto& gt = p.ground_truth[static_cast<std::size_t>(eye)];
            for (std::size_t i = 0; i < gt.size(); ++i) {
                if (i) labels << ',';
                labels << gt[i];
            }
            labels << '\n';
        }
    }
    vocab.save(out_dir / "vocab.txt");
}

}  // namespace retclip::data
