#include "latflow/cli.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

namespace latflow {

namespace {

constexpr std::uint64_t kSectionTag = 0x5ec7100f5eedull;
constexpr std::uint64_t kSynthTag = 0xb10b5eedull;
constexpr std::uint64_t kPairTag = 0x0de9a125eedull;
constexpr std::uint64_t kClipTag = 0xc11b9a125eedull;
constexpr std::uint64_t kInitTag = 0x1a171a15eedull;
constexpr std::uint64_t kCorruptTag = 0xadc0995eedull;

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

// round-trip exact double formatting, shared by logs and manifests
std::string fmt_g17(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

std::int64_t parse_i64(const std::string& where, const std::string& v) {
    std::int64_t out = 0;
    const char* b = v.data();
    const char* e = v.data() + v.size();
    auto [p, ec] = std::from_chars(b, e, out);
    if (ec != std::errc() || p != e) throw ConfigError("bad integer for " + where + ": '" + v + "'");
    return out;
}

std::uint64_t parse_u64(const std::string& where, const std::string& v) {
    std::uint64_t out = 0;
    const char* b = v.data();
    const char* e = v.data() + v.size();
    auto [p, ec] = std::from_chars(b, e, out);
    if (ec != std::errc() || p != e) throw ConfigError("bad unsigned integer for " + where + ": '" + v + "'");
    return out;
}

double parse_f64(const std::string& where, const std::string& v) {
    if (v.empty()) throw ConfigError("bad number for " + where + ": ''");
    std::size_t used = 0;
    double out = 0.0;
    try {
        out = std::stod(v, &used);
    } catch (const std::exception&) {
        throw ConfigError("bad number for " + where + ": '" + v + "'");
    }
    if (used != v.size()) throw ConfigError("bad number for " + where + ": '" + v + "'");
    return out;
}

bool parse_bool(const std::string& where, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("bad flag for " + where + ": '" + v + "' (use true/false)");
}

std::vector<std::int64_t> parse_i64_list(const std::string& where, const std::string& v) {
    std::vector<std::int64_t> out;
    std::string item;
    std::istringstream in(v);
    while (std::getline(in, item, ',')) out.push_back(parse_i64(where, trim(item)));
    if (out.empty()) throw ConfigError("empty list for " + where);
    return out;
}

Rat parse_rat(const std::string& where, const std::string& v) {
    std::size_t slash = v.find('/');
    if (slash == std::string::npos) return Rat(parse_i64(where, v));
    return Rat(parse_i64(where, trim(v.substr(0, slash))), parse_i64(where, trim(v.substr(slash + 1))));
}

// Typed view of one section that tracks which keys were read so leftovers can
// be reported as unknown.
class SectionReader {
  public:
    SectionReader(const ConfigMap& m, const std::string& name) : name_(name) {
        auto it = m.find(name);
        if (it != m.end()) kv_ = &it->second;
    }

    bool present() const { return kv_ != nullptr; }
    bool any_read() const { return !used_.empty(); }

    bool has(const std::string& key) const { return kv_ && kv_->count(key); }

    bool get(const std::string& key, std::string& out) {
        if (!has(key)) return false;
        used_.insert(key);
        out = kv_->at(key);
        return true;
    }
    bool get(const std::string& key, std::int64_t& out) {
        std::string v;
        if (!get(key, v)) return false;
        out = parse_i64(name_ + "." + key, v);
        return true;
    }
    bool get(const std::string& key, std::uint64_t& out) {
        std::string v;
        if (!get(key, v)) return false;
        out = parse_u64(name_ + "." + key, v);
        return true;
    }
    bool get(const std::string& key, double& out) {
        std::string v;
        if (!get(key, v)) return false;
        out = parse_f64(name_ + "." + key, v);
        return true;
    }
    bool get(const std::string& key, bool& out) {
        std::string v;
        if (!get(key, v)) return false;
        out = parse_bool(name_ + "." + key, v);
        return true;
    }
    bool get(const std::string& key, std::vector<std::int64_t>& out) {
        std::string v;
        if (!get(key, v)) return false;
        out = parse_i64_list(name_ + "." + key, v);
        return true;
    }
    bool get(const std::string& key, Rat& out) {
        std::string v;
        if (!get(key, v)) return false;
        out = parse_rat(name_ + "." + key, v);
        return true;
    }
    bool get(const std::string& key, PatchKernel& out) {
        std::vector<std::int64_t> v;
        if (!get(key, v)) return false;
        if (v.size() != 3) throw ConfigError(name_ + "." + key + " needs exactly three values t,h,w");
        out = {v[0], v[1], v[2]};
        return true;
    }

    // remaining keys are typos; name them
    void finish() const {
        if (!kv_) return;
        for (const auto& [k, v] : *kv_)
            if (!used_.count(k)) throw ConfigError("unknown key " + name_ + "." + k);
    }

    const std::map<std::string, std::string>* raw() const { return kv_; }
    void mark_used(const std::string& key) { used_.insert(key); }
    const std::string& name() const { return name_; }

  private:
    const std::map<std::string, std::string>* kv_ = nullptr;
    std::set<std::string> used_;
    std::string name_;
};

void read_opt(SectionReader& r, AdamWConfig& o) {
    r.get("lr", o.lr);
    r.get("beta1", o.beta1);
    r.get("beta2", o.beta2);
    r.get("eps", o.eps);
    r.get("weight_decay", o.weight_decay);
    r.get("clip", o.clip);
    r.finish();
}

bool same_kernel(const PatchKernel& a, const PatchKernel& b) { return a.t == b.t && a.h == b.h && a.w == b.w; }

bool same_plan(const MemoryPlan& a, const MemoryPlan& b) {
    for (int i = 0; i < 3; i++)
        if (a.frames[static_cast<std::size_t>(i)] != b.frames[static_cast<std::size_t>(i)] ||
            !same_kernel(a.kernels[static_cast<std::size_t>(i)], b.kernels[static_cast<std::size_t>(i)]))
            return false;
    return a.h == b.h && a.w == b.w;
}

bool same_arch(const DitConfig& a, const DitConfig& b) {
    return a.d_model == b.d_model && a.n_heads == b.n_heads && a.n_layers == b.n_layers && a.d_text == b.d_text &&
           a.mlp_mult == b.mlp_mult && a.channels == b.channels && a.k_stages == b.k_stages &&
           same_kernel(a.noisy_kernel, b.noisy_kernel) && a.rope_base == b.rope_base && a.rope_mode == b.rope_mode &&
           a.norm_eps == b.norm_eps && a.time_scale == b.time_scale;
}

// adopt the checkpoint's architecture unless the config explicitly pinned one
void apply_checkpoint(RunConfig& cfg, const DitParams& p, const std::string& path) {
    if (cfg.arch_explicit && !same_arch(cfg.arch, p.cfg))
        throw ConfigError("checkpoint/config mismatch: [arch] disagrees with " + path);
    if (cfg.plan_explicit && !same_plan(cfg.plan, p.plan))
        throw ConfigError("checkpoint/config mismatch: [plan] disagrees with " + path);
    cfg.arch = p.cfg;
    cfg.plan = p.plan;
}

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir + ": " + ec.message());
}

std::string dir_of(const std::string& path) {
    std::filesystem::path p(path);
    std::string d = p.parent_path().string();
    return d.empty() ? "." : d;
}

double wrap_coord(double v, double size) {
    double w = std::fmod(v, size);
    return w < 0.0 ? w + size : w;
}

double torus_d2(double a, double b, double size) {
    double d = std::fabs(a - b);
    d = std::min(d, size - d);
    return d * d;
}

SectionModel model_of(const DitParams& params, std::int64_t l_text) {
    DMat zero_text(l_text, params.cfg.d_text);
    return [params, zero_text](const DLatent& x, const HistoryContext& h, const PromptEmbedding& tx, double lambda,
                               std::int64_t stage, bool cond) {
        return dit_forward(params, x, h, cond ? tx : zero_text, lambda, stage, nullptr);
    };
}

Latent frame_of(const Latent& x, std::int64_t t) {
    Latent f({x.dims.b, x.dims.c, 1, x.dims.h, x.dims.w});
    copy_frame(f, 0, x, t);
    return f;
}

std::vector<Latent> load_dataset(const std::string& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) throw IoError("cannot open dataset manifest " + manifest_path);
    std::string base = dir_of(manifest_path);
    std::vector<Latent> clips;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::size_t tab = line.find('\t');
        std::string file = tab == std::string::npos ? line : line.substr(0, tab);
        clips.push_back(read_latent(base + "/" + file));
    }
    if (clips.empty()) throw ConfigError("dataset manifest " + manifest_path + " lists no clips");
    return clips;
}

std::ofstream open_out(const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    return out;
}

}  // namespace

// -------- config parsing --------

ConfigMap parse_config_text(const std::string& text) {
    ConfigMap m;
    std::string section;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        lineno++;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#' || t[0] == ';') continue;
        if (t.front() == '[') {
            if (t.back() != ']' || t.size() < 3)
                throw ConfigError("config line " + std::to_string(lineno) + ": malformed section header");
            section = trim(t.substr(1, t.size() - 2));
            if (section.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty section name");
            m[section];
            continue;
        }
        std::size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
        if (section.empty())
            throw ConfigError("config line " + std::to_string(lineno) + ": key outside any [section]");
        std::string key = trim(t.substr(0, eq));
        std::string value = trim(t.substr(eq + 1));
        if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
        if (m[section].count(key))
            throw ConfigError("config line " + std::to_string(lineno) + ": duplicate key " + section + "." + key);
        m[section][key] = value;
    }
    return m;
}

ConfigMap parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config_text(buf.str());
}

void set_config_value(ConfigMap& m, const std::string& dotted_key, const std::string& value) {
    std::size_t dot = dotted_key.find('.');
    if (dot == std::string::npos || dot == 0 || dot + 1 == dotted_key.size())
        throw ConfigError("override key must look like section.key, got '" + dotted_key + "'");
    m[dotted_key.substr(0, dot)][dotted_key.substr(dot + 1)] = value;
}

void BlobConfig::validate() const {
    if (clips < 1 || frames < 1 || blobs < 1) throw ConfigError("synth counts must be positive");
    if (!(sigma_min > 0.0) || !(sigma_max >= sigma_min)) throw ConfigError("synth sigma range invalid");
    if (!(color_max > 0.0)) throw ConfigError("synth color range must be positive");
    if (!(vel_max >= 0.0)) throw ConfigError("synth velocity bound must be nonnegative");
}

StageSchedule RunConfig::schedule() const {
    StageSchedule s = make_schedule(arch.k_stages, total_steps, base_shift, t_max);
    if (!steps_override.empty()) {
        if (static_cast<std::int64_t>(steps_override.size()) != arch.k_stages)
            throw ConfigError("schedule.steps needs one count per stage");
        s.steps = steps_override;
        s.validate();
    }
    return s;
}

void RunConfig::validate() const {
    if (sections < 1) throw ConfigError("run.sections must be at least 1");
    if (section_frames < 1) throw ConfigError("run.section_frames must be positive");
    if (l_text < 1) throw ConfigError("prompts.l_text must be positive");
    if (train_steps < 1) throw ConfigError("train.steps must be positive");
    if (train_stage != 1 && train_stage != 2) throw ConfigError("train.stage must be 1 or 2");
    if (ckpt_every < 0) throw ConfigError("train.ckpt_every must be nonnegative");
    if (distill_steps < 1) throw ConfigError("distill.steps must be positive");
    if (ode_pairs < 0) throw ConfigError("distill.ode_pairs must be nonnegative");
    if (cost_time_sections < 0) throw ConfigError("cost.time_sections must be nonnegative");
    arch.validate();
    plan.validate();
    corrupt.validate();
    task_dist.validate();
    drift.validate();
    train_opt.validate();
    distill.distill.validate();
    distill.ode_opt.validate();
    distill.gen_opt.validate();
    distill.fake_opt.validate();
    synth.validate();
    cost.validate();
    schedule();  // throws when the stage split is inconsistent
    std::int64_t prev = -1;
    for (const PromptEvent& e : prompts) {
        if (e.section <= prev) throw ConfigError("prompt events must have strictly increasing sections");
        if (e.interp_m < 1) throw ConfigError("prompt interpolation window must be at least 1");
        if (e.source.rfind("seed:", 0) != 0 && e.source.rfind("file:", 0) != 0)
            throw ConfigError("prompt source must start with seed: or file:, got '" + e.source + "'");
        prev = e.section;
    }
}

RunConfig run_config_from(const ConfigMap& m) {
    static const std::set<std::string> known = {"run",     "arch",    "plan",    "schedule", "corrupt",
                                                "tasks",   "drift",   "train",   "train_opt", "distill",
                                                "gen_opt", "fake_opt", "ode_opt", "prompts",  "synth",
                                                "cost"};
    for (const auto& [sec, kv] : m)
        if (!known.count(sec)) throw ConfigError("unknown config section [" + sec + "]");

    RunConfig cfg;

    SectionReader run(m, "run");
    run.get("seed", cfg.seed);
    run.get("out", cfg.out_dir);
    run.get("sections", cfg.sections);
    run.get("section_frames", cfg.section_frames);
    run.get("cfg_scale", cfg.cfg_scale);
    run.get("checkpoint", cfg.checkpoint);
    run.get("dataset", cfg.dataset);
    run.get("init_image", cfg.init_image);
    run.get("init_clip", cfg.init_clip);
    run.finish();

    SectionReader arch(m, "arch");
    arch.get("d_model", cfg.arch.d_model);
    arch.get("n_heads", cfg.arch.n_heads);
    arch.get("n_layers", cfg.arch.n_layers);
    arch.get("d_text", cfg.arch.d_text);
    arch.get("mlp_mult", cfg.arch.mlp_mult);
    arch.get("channels", cfg.arch.channels);
    arch.get("k_stages", cfg.arch.k_stages);
    arch.get("noisy_kernel", cfg.arch.noisy_kernel);
    arch.get("rope_base", cfg.arch.rope_base);
    std::string rope_mode;
    if (arch.get("rope_mode", rope_mode)) {
        if (rope_mode == "postpatch") cfg.arch.rope_mode = RopeIndexing::PostPatch;
        else if (rope_mode == "prepatch") cfg.arch.rope_mode = RopeIndexing::PrePatch;
        else throw ConfigError("arch.rope_mode must be postpatch or prepatch");
    }
    arch.get("norm_eps", cfg.arch.norm_eps);
    arch.get("time_scale", cfg.arch.time_scale);
    arch.finish();
    cfg.arch_explicit = arch.any_read();

    SectionReader plan(m, "plan");
    std::vector<std::int64_t> frames;
    if (plan.get("frames", frames)) {
        if (frames.size() != 3) throw ConfigError("plan.frames needs three counts short,mid,long");
        cfg.plan.frames = {frames[0], frames[1], frames[2]};
    }
    plan.get("kernel_short", cfg.plan.kernels[0]);
    plan.get("kernel_mid", cfg.plan.kernels[1]);
    plan.get("kernel_long", cfg.plan.kernels[2]);
    plan.get("h", cfg.plan.h);
    plan.get("w", cfg.plan.w);
    plan.finish();
    cfg.plan_explicit = plan.any_read();

    SectionReader sched(m, "schedule");
    sched.get("total_steps", cfg.total_steps);
    sched.get("base_shift", cfg.base_shift);
    sched.get("t_max", cfg.t_max);
    sched.get("steps", cfg.steps_override);
    sched.finish();

    SectionReader corrupt(m, "corrupt");
    std::string preset;
    if (corrupt.get("preset", preset)) {
        if (preset == "base") cfg.corrupt = CorruptionPolicy::base_defaults();
        else if (preset == "distill") cfg.corrupt = CorruptionPolicy::distill_defaults();
        else throw ConfigError("corrupt.preset must be base or distill");
    }
    corrupt.get("p_noise", cfg.corrupt.p_noise);
    corrupt.get("p_downup", cfg.corrupt.p_downup);
    corrupt.get("p_exposure", cfg.corrupt.p_exposure);
    corrupt.get("p_clean", cfg.corrupt.p_clean);
    corrupt.get("gain_min", cfg.corrupt.gain_min);
    corrupt.get("gain_max", cfg.corrupt.gain_max);
    corrupt.get("noise_min", cfg.corrupt.noise_min);
    corrupt.get("noise_max", cfg.corrupt.noise_max);
    corrupt.get("frac_min", cfg.corrupt.frac_min);
    corrupt.get("frac_max", cfg.corrupt.frac_max);
    corrupt.finish();
    cfg.corrupt_explicit = corrupt.any_read();

    SectionReader tasks(m, "tasks");
    tasks.get("t2v", cfg.task_dist.t2v);
    tasks.get("i2v", cfg.task_dist.i2v);
    tasks.get("v2v", cfg.task_dist.v2v);
    tasks.finish();

    SectionReader drift(m, "drift");
    drift.get("enabled", cfg.drift_enabled);
    drift.get("rho_mean", cfg.drift.rho_mean);
    drift.get("rho_var", cfg.drift.rho_var);
    drift.get("delta_mean", cfg.drift.delta_mean);
    drift.get("delta_var", cfg.drift.delta_var);
    drift.finish();

    SectionReader train(m, "train");
    train.get("steps", cfg.train_steps);
    train.get("stage", cfg.train_stage);
    train.get("ema_decay", cfg.ema_decay);
    train.get("ckpt_every", cfg.ckpt_every);
    train.finish();

    SectionReader topt(m, "train_opt");
    read_opt(topt, cfg.train_opt);

    SectionReader dist(m, "distill");
    dist.get("steps", cfg.distill_steps);
    dist.get("ode_init_steps", cfg.distill.ode_init_steps);
    dist.get("ode_pairs", cfg.ode_pairs);
    dist.get("student_steps", cfg.distill.student_steps);
    dist.get("teacher_cfg", cfg.distill.teacher_cfg);
    dist.get("dmd_multiscale", cfg.distill.dmd_multiscale);
    dist.get("real_cfg", cfg.distill.distill.real_cfg);
    dist.get("lambda_d", cfg.distill.distill.lambda_d);
    dist.get("sigma_d", cfg.distill.distill.sigma_d);
    dist.get("w_g", cfg.distill.distill.w_g);
    dist.get("w_d", cfg.distill.distill.w_d);
    dist.get("ttur_ratio", cfg.distill.distill.ttur_ratio);
    dist.get("beta_a0", cfg.distill.distill.beta_a0);
    dist.get("beta_total_steps", cfg.distill.distill.beta_total_steps);
    dist.get("ema_decay", cfg.distill.distill.ema_decay);
    dist.get("ema_start", cfg.distill.distill.ema_start);
    dist.get("gan_taps", cfg.distill.distill.gan_taps);
    dist.get("gan_head_dim", cfg.distill.distill.gan_head_dim);
    dist.get("gan_start", cfg.distill.distill.gan_start);
    dist.get("crop_h", cfg.distill.distill.crop_h);
    dist.get("crop_w", cfg.distill.distill.crop_w);
    dist.finish();

    SectionReader gopt(m, "gen_opt");
    read_opt(gopt, cfg.distill.gen_opt);
    SectionReader fopt(m, "fake_opt");
    read_opt(fopt, cfg.distill.fake_opt);
    SectionReader oopt(m, "ode_opt");
    read_opt(oopt, cfg.distill.ode_opt);

    SectionReader prompts(m, "prompts");
    prompts.get("l_text", cfg.l_text);
    if (prompts.raw()) {
        std::vector<std::pair<std::int64_t, PromptEvent>> events;
        for (const auto& [k, v] : *prompts.raw()) {
            if (k.rfind("at_", 0) != 0) continue;
            prompts.mark_used(k);
            std::int64_t section = parse_i64("prompts." + k, k.substr(3));
            PromptEvent e;
            e.section = section;
            std::istringstream fields(v);
            std::string mtok;
            if (!(fields >> e.source)) throw ConfigError("prompts." + k + " needs a source");
            if (fields >> mtok) e.interp_m = parse_i64("prompts." + k, mtok);
            if (fields >> mtok) throw ConfigError("prompts." + k + " has trailing fields");
            events.emplace_back(section, e);
        }
        std::sort(events.begin(), events.end(),
                  [](const auto& a, const auto& b) { return a.first < b.first; });
        for (auto& [s, e] : events) cfg.prompts.push_back(std::move(e));
    }
    prompts.finish();

    SectionReader synth(m, "synth");
    synth.get("clips", cfg.synth.clips);
    synth.get("frames", cfg.synth.frames);
    synth.get("blobs", cfg.synth.blobs);
    synth.get("sigma_min", cfg.synth.sigma_min);
    synth.get("sigma_max", cfg.synth.sigma_max);
    synth.get("color_max", cfg.synth.color_max);
    synth.get("vel_max", cfg.synth.vel_max);
    synth.finish();

    cfg.cost.layers = cfg.arch.n_layers;
    cfg.cost.d_model = cfg.arch.d_model;
    SectionReader cost(m, "cost");
    cost.get("layers", cfg.cost.layers);
    cost.get("d_model", cfg.cost.d_model);
    cost.get("batch", cfg.cost.batch);
    cost.get("alpha", cfg.cost.alpha);
    cost.get("beta", cfg.cost.beta);
    cost.get("gamma", cfg.cost.gamma_act);
    cost.get("time_sections", cfg.cost_time_sections);
    cost.finish();

    cfg.validate();
    return cfg;
}

// -------- prompts --------

PromptEmbedding synthetic_prompt(std::int64_t l, std::int64_t d, std::uint64_t seed) {
    if (l < 1 || d < 1) throw ConfigError("prompt embedding dims must be positive");
    Rng rng(seed);
    return randn_mat(l, d, rng);
}

PromptEmbedding resolve_prompt_source(const std::string& source, std::int64_t l, std::int64_t d) {
    if (source.rfind("seed:", 0) == 0) return synthetic_prompt(l, d, parse_u64("prompt source", source.substr(5)));
    if (source.rfind("file:", 0) == 0) {
        Latent x = read_latent(source.substr(5));
        if (x.dims.b != 1 || x.dims.c != 1 || x.dims.t != 1 || x.dims.h != l || x.dims.w != d)
            throw DimensionError("prompt file " + source.substr(5) + " has dims " + x.dims.str() + ", expected (1,1,1," +
                                 std::to_string(l) + "," + std::to_string(d) + ")");
        PromptEmbedding e(l, d);
        for (std::size_t i = 0; i < e.a.size(); i++) e.a[i] = static_cast<double>(x.data[i]);
        return e;
    }
    throw ConfigError("prompt source must start with seed: or file:, got '" + source + "'");
}

void write_prompt(const std::string& path, const PromptEmbedding& e) {
    Latent x({1, 1, 1, e.rows, e.cols});
    for (std::size_t i = 0; i < e.a.size(); i++) x.data[i] = static_cast<float>(e.a[i]);
    write_latent(path, x);
}

std::vector<PromptEmbedding> unroll_prompt_schedule(const std::vector<PromptEvent>& events,
                                                    std::int64_t sections, std::int64_t l, std::int64_t d,
                                                    std::uint64_t base_seed) {
    if (sections < 1) throw ConfigError("prompt unroll needs at least one section");
    std::int64_t prev = -1;
    for (const PromptEvent& e : events) {
        if (e.section <= prev) throw ConfigError("prompt events must have strictly increasing sections");
        if (e.interp_m < 1) throw ConfigError("prompt interpolation window must be at least 1");
        prev = e.section;
    }

    PromptEmbedding current = synthetic_prompt(l, d, base_seed);
    std::size_t next = 0;
    if (!events.empty() && events[0].section == 0) {
        // the opening event sets the base prompt outright
        current = resolve_prompt_source(events[0].source, l, d);
        next = 1;
    }

    std::vector<PromptEmbedding> out;
    out.reserve(static_cast<std::size_t>(sections));
    PromptEmbedding from = current, target = current;
    std::int64_t window = 0, step_in_window = 0;
    PromptEmbedding last_used = current;
    for (std::int64_t s = 0; s < sections; s++) {
        if (next < events.size() && events[next].section == s) {
            // a fresh event starts from whatever the previous section used,
            // cancelling any unfinished blend
            from = last_used;
            target = resolve_prompt_source(events[next].source, l, d);
            window = events[next].interp_m;
            step_in_window = 0;
            next++;
        }
        PromptEmbedding used = current;
        if (window > 0) {
            double alpha = static_cast<double>(step_in_window + 1) / static_cast<double>(window);
            used = interpolate_prompts(from, target, alpha);
            step_in_window++;
            if (step_in_window == window) {
                current = target;
                window = 0;
            }
        }
        out.push_back(used);
        last_used = std::move(used);
    }
    return out;
}

// -------- synthetic clips --------

Latent blob_frame(LatentDims frame_dims, const std::vector<double>& cy, const std::vector<double>& cx,
                  const std::vector<double>& sigma, const DMat& color) {
    if (frame_dims.t != 1) throw DimensionError("blob frame dims must have T=1, got " + frame_dims.str());
    std::size_t n = cy.size();
    if (cx.size() != n || sigma.size() != n || static_cast<std::size_t>(color.rows) != n)
        throw DimensionError("blob parameter lists disagree in length");
    if (color.cols != frame_dims.c) throw DimensionError("blob color channels do not match the frame");
    Latent out(frame_dims);
    double hs = static_cast<double>(frame_dims.h), ws = static_cast<double>(frame_dims.w);
    for (std::int64_t y = 0; y < frame_dims.h; y++) {
        for (std::int64_t x = 0; x < frame_dims.w; x++) {
            for (std::size_t j = 0; j < n; j++) {
                double d2 = torus_d2(static_cast<double>(y), wrap_coord(cy[j], hs), hs) +
                            torus_d2(static_cast<double>(x), wrap_coord(cx[j], ws), ws);
                double wgt = std::exp(-d2 / (2.0 * sigma[j] * sigma[j]));
                for (std::int64_t c = 0; c < frame_dims.c; c++)
                    for (std::int64_t b = 0; b < frame_dims.b; b++)
                        out.at(b, c, 0, y, x) += static_cast<float>(color(static_cast<std::int64_t>(j), c) * wgt);
            }
        }
    }
    return out;
}

Latent synth_clip(const BlobConfig& cfg, std::int64_t channels, std::int64_t h, std::int64_t w,
                  std::uint64_t seed, BlobInfo* info) {
    cfg.validate();
    if (channels < 1 || h < 1 || w < 1) throw DimensionError("clip dims must be positive");
    Rng rng(seed);
    BlobInfo blobs;
    blobs.color = DMat(cfg.blobs, channels);
    for (std::int64_t j = 0; j < cfg.blobs; j++) {
        blobs.y0.push_back(rng.uniform(0.0, static_cast<double>(h)));
        blobs.x0.push_back(rng.uniform(0.0, static_cast<double>(w)));
        blobs.vy.push_back(rng.uniform(-cfg.vel_max, cfg.vel_max));
        blobs.vx.push_back(rng.uniform(-cfg.vel_max, cfg.vel_max));
        blobs.sigma.push_back(rng.uniform(cfg.sigma_min, cfg.sigma_max));
        for (std::int64_t c = 0; c < channels; c++) blobs.color(j, c) = rng.uniform(-cfg.color_max, cfg.color_max);
    }

    Latent clip({1, channels, cfg.frames, h, w});
    std::vector<double> cy(static_cast<std::size_t>(cfg.blobs)), cx(static_cast<std::size_t>(cfg.blobs));
    for (std::int64_t t = 0; t < cfg.frames; t++) {
        for (std::int64_t j = 0; j < cfg.blobs; j++) {
            cy[static_cast<std::size_t>(j)] = blobs.y0[static_cast<std::size_t>(j)] + static_cast<double>(t) * blobs.vy[static_cast<std::size_t>(j)];
            cx[static_cast<std::size_t>(j)] = blobs.x0[static_cast<std::size_t>(j)] + static_cast<double>(t) * blobs.vx[static_cast<std::size_t>(j)];
        }
        Latent f = blob_frame({1, channels, 1, h, w}, cy, cx, blobs.sigma, blobs.color);
        copy_frame(clip, t, f, 0);
    }
    if (info) *info = std::move(blobs);
    return clip;
}

// -------- commands --------

SynthResult cmd_synth(const RunConfig& cfg) {
    cfg.validate();
    ensure_dir(cfg.out_dir);
    SynthResult res;
    res.manifest_path = cfg.out_dir + "/dataset.tsv";
    std::ofstream manifest = open_out(res.manifest_path);
    manifest << "# latflow synthetic dataset\n";
    manifest << "# columns: file\tclip\tframes\tseed\n";
    for (std::int64_t i = 0; i < cfg.synth.clips; i++) {
        std::uint64_t clip_seed = splitmix64_at(cfg.seed ^ kSynthTag, static_cast<std::uint64_t>(i));
        Latent clip = synth_clip(cfg.synth, cfg.arch.channels, cfg.plan.h, cfg.plan.w, clip_seed);
        char name[32];
        std::snprintf(name, sizeof(name), "clip_%04lld.hlat", static_cast<long long>(i));
        write_latent(cfg.out_dir + "/" + name, clip);
        manifest << name << "\t" << i << "\t" << cfg.synth.frames << "\t" << clip_seed << "\n";
        res.files.push_back(cfg.out_dir + "/" + name);
    }
    if (!manifest.good()) throw IoError("manifest write failed in " + cfg.out_dir);
    return res;
}

GenerateResult cmd_generate(const RunConfig& cfg0) {
    RunConfig cfg = cfg0;
    cfg.validate();
    if (cfg.checkpoint.empty()) throw ConfigError("generate needs run.checkpoint");
    if (!cfg.init_image.empty() && !cfg.init_clip.empty())
        throw ConfigError("run.init_image and run.init_clip are mutually exclusive");
    DitParams params = load_checkpoint(cfg.checkpoint);
    apply_checkpoint(cfg, params, cfg.checkpoint);
    StageSchedule sched = cfg.schedule();
    ensure_dir(cfg.out_dir);

    std::vector<PromptEmbedding> prompts =
        unroll_prompt_schedule(cfg.prompts, cfg.sections, cfg.l_text, cfg.arch.d_text, cfg.seed);

    HistoryBuffer buf(cfg.plan);
    std::optional<HistoryContext> first_hist;
    if (!cfg.init_clip.empty()) {
        Latent clip = read_latent(cfg.init_clip);
        if (clip.dims.t < 1) throw DimensionError("init clip has no frames");
        for (std::int64_t t = 0; t < clip.dims.t; t++) buf.push(frame_of(clip, t));
    } else if (!cfg.init_image.empty()) {
        Latent img = read_latent(cfg.init_image);
        if (img.dims.t != 1) throw DimensionError("init image must hold exactly one frame, got " + img.dims.str());
        first_hist = i2v_history(img, cfg.plan);
        buf.push(img);
    } else {
        first_hist = t2v_history(cfg.plan, 1, cfg.arch.channels);
    }

    SectionModel model = model_of(params, cfg.l_text);
    DriftTracker tracker = cfg.drift;
    Rng corrupt_rng = Rng(cfg.seed).fork(kCorruptTag);
    bool flagged = false;

    GenerateResult res;
    res.hist_tokens_per_section = 0;
    TokenBudget budget = token_budget(cfg.plan);

    struct Row {
        std::string file;
        std::int64_t section;
        bool corrected;
    };
    std::vector<Row> rows;

    for (std::int64_t s = 0; s < cfg.sections; s++) {
        HistoryContext hist = (s == 0 && first_hist) ? *first_hist : buf.assemble();
        if (s == 0) res.mode = task_mode(hist);
        bool corrected = cfg.drift_enabled && flagged;
        hist = adaptive_corrupt(hist, corrected, cfg.corrupt, cfg.section_frames, corrupt_rng);

        std::uint64_t sec_seed = splitmix64_at(cfg.seed ^ kSectionTag, static_cast<std::uint64_t>(s));
        Latent sec = sample_section(model, hist, prompts[static_cast<std::size_t>(s)], sched, sec_seed,
                                    cfg.cfg_scale, cfg.section_frames);

        char name[32];
        std::snprintf(name, sizeof(name), "section_%04lld.hlat", static_cast<long long>(s));
        write_latent(cfg.out_dir + "/" + name, sec);
        res.files.push_back(cfg.out_dir + "/" + name);
        rows.push_back({name, s, corrected});

        for (std::int64_t t = 0; t < sec.dims.t; t++) buf.push(frame_of(sec, t));
        res.peak_window_bytes = std::max(res.peak_window_bytes, buf.window_bytes());

        ChannelStats stats = section_stats(sec);
        update_tracker(tracker, stats);
        flagged = drift_triggered(tracker, stats);
    }

    res.manifest_path = cfg.out_dir + "/manifest.tsv";
    std::ofstream manifest = open_out(res.manifest_path);
    manifest << "# latflow generation manifest\n";
    manifest << "# mode\t" << task_mode_name(res.mode) << "\n";
    manifest << "# sections\t" << cfg.sections << "\n";
    manifest << "# section_frames\t" << cfg.section_frames << "\n";
    manifest << "# seed\t" << cfg.seed << "\n";
    manifest << "# hist_tokens\t" << budget.total.str() << "\n";
    manifest << "# peak_window_bytes\t" << res.peak_window_bytes << "\n";
    manifest << "# columns: file\tsection\tframes\tcorrected\n";
    for (const Row& r : rows)
        manifest << r.file << "\t" << r.section << "\t" << cfg.section_frames << "\t" << (r.corrected ? 1 : 0)
                 << "\n";
    if (!manifest.good()) throw IoError("manifest write failed in " + cfg.out_dir);

    if (budget.total.is_integer()) res.hist_tokens_per_section = budget.total.num;
    return res;
}

TrainResult cmd_train(const RunConfig& cfg0) {
    RunConfig cfg = cfg0;
    cfg.validate();
    if (cfg.dataset.empty()) throw ConfigError("train needs run.dataset");
    std::vector<Latent> clips = load_dataset(cfg.dataset);

    DitParams params;
    if (!cfg.checkpoint.empty()) {
        params = load_checkpoint(cfg.checkpoint);
        apply_checkpoint(cfg, params, cfg.checkpoint);
    } else {
        params = make_dit_params(cfg.arch, cfg.plan);
        Rng init_rng = Rng(cfg.seed).fork(kInitTag);
        init_dit_params(params, init_rng);
    }
    StageSchedule sched = cfg.schedule();
    std::int64_t K = sched.k_stages;
    ensure_dir(cfg.out_dir);

    DitParams ema = params;
    AdamW opt(param_ptrs(params), cfg.train_opt);
    PromptEmbedding text =
        unroll_prompt_schedule(cfg.prompts, 1, cfg.l_text, cfg.arch.d_text, cfg.seed)[0];

    TrainResult res;
    res.log_path = cfg.out_dir + "/train_log.tsv";
    std::ofstream log = open_out(res.log_path);
    log << "# latflow flow-training log, stage " << cfg.train_stage << "\n";
    log << "# columns: step\tstage_k\tlambda\tloss\n";

    Rng root(cfg.seed);
    for (std::int64_t step = 0; step < cfg.train_steps; step++) {
        Rng rng = root.fork(static_cast<std::uint64_t>(step));
        const Latent& clip = clips[rng.below(clips.size())];
        TeacherForcedSample sample =
            assemble_teacher_forced_sample(clip, cfg.plan, cfg.corrupt, rng, cfg.section_frames);
        zero_out_history(sample.history, cfg.task_dist, rng);

        Pyramid pyr = make_pyramid(sample.target, K);
        std::int64_t k = 1 + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(K)));
        DLatent x_k = widen(pyr.levels[static_cast<std::size_t>(k - 1)]);
        DLatent start;
        if (k == 1) {
            start = widen(seeded_gaussian(x_k.dims, rng.next_u64()));
        } else {
            start = widen(upsample_nearest(pyr.levels[static_cast<std::size_t>(k - 2)], 2));
        }
        double t_hi = sched.boundaries[static_cast<std::size_t>(k - 1)];
        double t_lo = sched.boundaries[static_cast<std::size_t>(k)];
        double lambda = lambda_of_timestep(t_lo + rng.uniform() * (t_hi - t_lo), k, sched);

        DLatent x_t = sample_path_point(x_k, start, lambda);
        DLatent v_star = target_velocity(x_k, start);

        DitRecord rec;
        DLatent u = dit_forward(params, x_t, sample.history, text, lambda, k, &rec);
        double loss = flow_loss(u, v_star);
        DitParams grads = zeros_like(params);
        dit_backward(params, rec, sample.history, text, flow_loss_grad(u, v_star), grads);
        opt.step(param_ptrs(static_cast<const DitParams&>(grads)));
        ema_update(params, ema, cfg.ema_decay);

        log << step << "\t" << k << "\t" << fmt_g17(lambda) << "\t" << fmt_g17(loss) << "\n";

        if (cfg.ckpt_every > 0 && (step + 1) % cfg.ckpt_every == 0) {
            char suffix[32];
            std::snprintf(suffix, sizeof(suffix), "%06lld", static_cast<long long>(step + 1));
            save_checkpoint(cfg.out_dir + "/ckpt_" + suffix + ".hckp", params);
            save_checkpoint(cfg.out_dir + "/ckpt_ema_" + suffix + ".hckp", ema);
        }
    }
    if (!log.good()) throw IoError("log write failed in " + cfg.out_dir);

    res.ckpt_path = cfg.out_dir + "/ckpt_final.hckp";
    res.ema_path = cfg.out_dir + "/ckpt_ema_final.hckp";
    save_checkpoint(res.ckpt_path, params);
    save_checkpoint(res.ema_path, ema);
    res.steps = cfg.train_steps;
    return res;
}

DistillResult cmd_distill(const RunConfig& cfg0) {
    RunConfig cfg = cfg0;
    cfg.validate();
    if (cfg.dataset.empty()) throw ConfigError("distill needs run.dataset");
    if (cfg.checkpoint.empty()) throw ConfigError("distill needs run.checkpoint (the teacher)");
    std::vector<Latent> clips = load_dataset(cfg.dataset);
    DitParams teacher = load_checkpoint(cfg.checkpoint);
    apply_checkpoint(cfg, teacher, cfg.checkpoint);
    ensure_dir(cfg.out_dir);

    DistillRunConfig dc = cfg.distill;
    dc.arch = cfg.arch;
    dc.plan = cfg.plan;
    dc.schedule = cfg.schedule();
    dc.section_frames = cfg.section_frames;
    if (cfg.corrupt_explicit) dc.policy = cfg.corrupt;
    dc.validate();

    PromptEmbedding text =
        unroll_prompt_schedule(cfg.prompts, 1, cfg.l_text, cfg.arch.d_text, cfg.seed)[0];
    DistillRun run(teacher, dc, text, cfg.seed);

    if (dc.ode_init_steps > 0) {
        if (cfg.ode_pairs < 1) throw ConfigError("distill.ode_init_steps needs distill.ode_pairs >= 1");
        std::vector<std::uint64_t> seeds;
        for (std::int64_t i = 0; i < cfg.ode_pairs; i++)
            seeds.push_back(splitmix64_at(cfg.seed ^ kPairTag, static_cast<std::uint64_t>(i)));
        auto history_for = [&](std::uint64_t seed) {
            Rng rng(seed);
            const Latent& clip = clips[seed % clips.size()];
            return assemble_teacher_forced_sample(clip, dc.plan, dc.policy, rng, dc.section_frames).history;
        };
        SectionModel teacher_model = model_of(teacher, cfg.l_text);
        run.add_ode_pairs(generate_ode_pairs(teacher_model, history_for, text, dc.schedule, seeds,
                                             dc.teacher_cfg, dc.section_frames, cfg.out_dir + "/pairs"));
    }

    DistillResult res;
    res.log_path = cfg.out_dir + "/distill_log.tsv";
    std::ofstream log = open_out(res.log_path);
    log << "# latflow distillation log\n";
    log << "# columns: step\tphase\tloss\taux\n";
    for (std::int64_t s = 0; s < cfg.distill_steps; s++) {
        const Latent& clip = clips[splitmix64_at(cfg.seed ^ kClipTag, static_cast<std::uint64_t>(s)) % clips.size()];
        DistillRun::StepLog lg = run.step(clip);
        log << lg.step << "\t" << lg.phase << "\t" << fmt_g17(lg.loss) << "\t" << fmt_g17(lg.aux) << "\n";
    }
    if (!log.good()) throw IoError("log write failed in " + cfg.out_dir);

    res.gen_path = cfg.out_dir + "/ckpt_gen_final.hckp";
    res.ema_path = cfg.out_dir + "/ckpt_ema_final.hckp";
    save_checkpoint(res.gen_path, run.generator());
    save_checkpoint(res.ema_path, run.ema_params());
    res.generator_updates = run.generator_updates();
    res.fake_updates = run.fake_updates();
    return res;
}

std::string cmd_score(const std::vector<std::string>& paths, const std::string& out_dir) {
    if (paths.empty()) throw ConfigError("score needs at least one input file");
    MetricSpecs specs = default_metric_specs();
    std::vector<VideoReport> all;
    for (const std::string& p : paths) {
        std::vector<VideoReport> reps = score_file(p, specs);
        all.insert(all.end(), std::make_move_iterator(reps.begin()), std::make_move_iterator(reps.end()));
    }
    if (!out_dir.empty()) {
        ensure_dir(out_dir);
        std::ofstream tsv = open_out(out_dir + "/report.tsv");
        tsv << report_tsv(all);
        if (!tsv.good()) throw IoError("report write failed in " + out_dir);
    }
    return format_report(all);
}

std::string cmd_cost(const RunConfig& cfg) {
    cfg.validate();
    StageSchedule sched = cfg.schedule();
    CostReport rep = cost_report(sched, cfg.plan, cfg.cost, cfg.section_frames);
    std::ostringstream os;
    os << rep.str();

    if (cfg.cost_time_sections > 0) {
        DitParams params = make_dit_params(cfg.arch, cfg.plan);
        Rng init_rng = Rng(cfg.seed).fork(kInitTag);
        init_dit_params(params, init_rng);
        SectionModel model = model_of(params, cfg.l_text);
        PromptEmbedding text = synthetic_prompt(cfg.l_text, cfg.arch.d_text, cfg.seed);
        HistoryContext hist = t2v_history(cfg.plan, 1, cfg.arch.channels);

        auto t0 = std::chrono::steady_clock::now();
        for (std::int64_t s = 0; s < cfg.cost_time_sections; s++)
            sample_section(model, hist, text, sched, splitmix64_at(cfg.seed ^ kSectionTag, static_cast<std::uint64_t>(s)),
                           cfg.cfg_scale, cfg.section_frames);
        auto t1 = std::chrono::steady_clock::now();
        double total = std::chrono::duration<double>(t1 - t0).count();
        double per = total / static_cast<double>(cfg.cost_time_sections);
        double fps = per > 0.0 ? static_cast<double>(cfg.section_frames) / per : 0.0;
        os << "section latency     : " << std::fixed << std::setprecision(4) << per << " s (informational)\n";
        os << "engine throughput   : " << std::setprecision(3) << fps << " latent frames/s (informational)\n";
    }
    return os.str();
}

}  // namespace latflow
