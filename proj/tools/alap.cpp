// Command-line front end: fit, check, profile and simulate.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>

#include "CLI11.hpp"
#include "alap/alap.hpp"
#include "alap/check.hpp"
#include "alap/report_json.hpp"

namespace {

enum Exit { kOk = 0, kNotConverged = 1, kUsage = 2 };

struct RunConfig {
    std::string model;
    std::string data;
    std::size_t workers = 1;
    std::string ordering = "amd";
    double inner_tol = 1e-8;
    double outer_tol = 1e-6;
    std::string out;
    std::uint64_t seed = 20160101;
    double metric_max = 1e-5;
};

alap::Model load_model(const RunConfig& cfg)
{
    bool known = false;
    for (const auto& n : alap::model_names()) known = known || n == cfg.model;
    if (!known) throw alap::ModelError("unknown model '" + cfg.model + "'");
    alap::Dataset data;
    if (alap::model_needs_data(cfg.model)) {
        if (cfg.data.empty()) throw alap::DataError("model '" + cfg.model + "' needs --data");
        data = alap::load_dataset(cfg.data);
    }
    return alap::make_model(cfg.model, data);
}

std::unique_ptr<alap::LaplaceEngine> make_engine(const RunConfig& cfg)
{
    alap::LaplaceOptions lo;
    lo.workers = cfg.workers;
    lo.inner_tol = cfg.inner_tol;
    lo.ordering = cfg.ordering == "natural" ? alap::OrderingMethod::natural : alap::OrderingMethod::amd;
    return std::make_unique<alap::LaplaceEngine>(load_model(cfg), lo);
}

void print_summary(const alap::FitReport& r)
{
    std::printf("model %s: %s after %d iterations\n", r.model.c_str(), r.converged ? "converged" : "NOT converged",
                r.iterations);
    std::printf("objective %.10g, gradient norm %.3g\n", r.objective, r.grad_norm);
    for (std::size_t i = 0; i < r.theta_hat.size(); ++i) {
        const std::string name = i < r.parameter_names.size() ? r.parameter_names[i] : "theta" + std::to_string(i);
        if (r.theta_se)
            std::printf("  %-10s %14.6g  (se %.4g)\n", name.c_str(), r.theta_hat[i], (*r.theta_se)[i]);
        else
            std::printf("  %-10s %14.6g\n", name.c_str(), r.theta_hat[i]);
    }
    if (!r.diagnostic.empty()) std::printf("note: %s\n", r.diagnostic.c_str());
}

void write_json(const RunConfig& cfg, const nlohmann::ordered_json& j)
{
    if (cfg.out.empty()) return;
    std::ofstream os(cfg.out);
    if (!os) throw alap::DataError("cannot write '" + cfg.out + "'");
    os << j.dump(2) << '\n';
}

int cmd_fit(const RunConfig& cfg)
{
    auto engine = make_engine(cfg);
    alap::FitOptions fo;
    fo.outer_tol = cfg.outer_tol;
    const auto rep = alap::fit(*engine, engine->model().theta0, fo);
    print_summary(rep);
    write_json(cfg, alap::to_json(rep));
    return rep.converged ? kOk : kNotConverged;
}

int cmd_check(const RunConfig& cfg)
{
    auto engine = make_engine(cfg);
    alap::CheckOptions co;
    co.metric_max = cfg.metric_max;
    co.seed = cfg.seed;
    const auto items = alap::run_checks(*engine, co);
    bool ok = true;
    double max_r = 0;
    nlohmann::ordered_json j = nlohmann::ordered_json::array();
    for (const auto& it : items) {
        std::printf("%-4s %-52s %12.4g  (limit %g)%s%s\n", it.passed ? "PASS" : "FAIL", it.name.c_str(), it.value,
                    it.limit, it.note.empty() ? "" : "  ", it.note.c_str());
        ok = ok && it.passed;
        if (it.name.find("vs") != std::string::npos) max_r = std::max(max_r, it.value);
        j.push_back({{"name", it.name}, {"value", it.value}, {"limit", it.limit}, {"passed", it.passed}});
    }
    std::printf("max r over checks: %.4g\n", max_r);
    write_json(cfg, {{"model", cfg.model}, {"checks", j}, {"max_r", max_r}, {"passed", ok}});
    return ok ? kOk : kNotConverged;
}

int cmd_profile(const RunConfig& cfg)
{
    using clock = std::chrono::steady_clock;
    const auto t0 = clock::now();
    auto engine = make_engine(cfg);
    alap::FitOptions fo;
    fo.outer_tol = cfg.outer_tol;
    fo.uncertainty = false;
    const auto rep = alap::fit(*engine, engine->model().theta0, fo);
    const double total = std::chrono::duration<double>(clock::now() - t0).count();
    const alap::Profile& p = engine->profile();

    const double parts[4] = {p.chol_seconds, p.inv_seconds, p.init_seconds, p.sweep_seconds};
    const char* names[5] = {"sp chol", "sp inv", "AD init", "AD sweep", "other"};
    double shares[5];
    double used = 0;
    for (int i = 0; i < 4; ++i) {
        shares[i] = 100 * parts[i] / total;
        used += parts[i];
    }
    shares[4] = 100 * std::max(0.0, total - used) / total;
    std::printf("model %s: fit %s in %.3f s (%d outer iterations, %zu inner iterations)\n", cfg.model.c_str(),
                rep.converged ? "converged" : "NOT converged", total, rep.iterations, p.inner_iterations);
    std::printf("%-10s %8s\n", "part", "percent");
    for (int i = 0; i < 5; ++i) std::printf("%-10s %8.1f\n", names[i], shares[i]);
    std::printf("\n%-5s %10s %8s %14s\n", "step", "seconds", "calls", "flops");
    for (std::size_t s = 0; s < alap::kStepCount; ++s)
        std::printf("%-5s %10.4f %8zu %14llu\n", alap::step_name(static_cast<alap::Step>(s)), p.step_seconds[s],
                    p.step_calls[s], static_cast<unsigned long long>(p.step_flops[s]));

    const auto cg = alap::measure_cheap_gradient(*engine, rep.theta_hat);
    std::printf("\ntime(value+gradient) / time(value) = %.3f  (bound 4: %s, below 2.8: %s)\n", cg.ratio(),
                cg.ratio() <= 4 ? "yes" : "no", cg.ratio() < 2.8 ? "yes" : "no");

    nlohmann::ordered_json j;
    j["model"] = cfg.model;
    j["seconds"] = total;
    for (int i = 0; i < 5; ++i) j["shares"][names[i]] = shares[i];
    for (std::size_t s = 0; s < alap::kStepCount; ++s) {
        const char* sn = alap::step_name(static_cast<alap::Step>(s));
        j["steps"][sn] = {{"seconds", p.step_seconds[s]}, {"calls", p.step_calls[s]}, {"flops", p.step_flops[s]}};
    }
    j["cheap_gradient_ratio"] = cg.ratio();
    j["converged"] = rep.converged;
    write_json(cfg, j);
    return rep.converged && cg.ratio() <= 4 ? kOk : kNotConverged;
}

int cmd_simulate(const RunConfig& cfg)
{
    const alap::Dataset d = alap::simulate(cfg.model, cfg.seed);
    if (cfg.out.empty())
        alap::write_dataset(std::cout, d);
    else
        alap::save_dataset(cfg.out, d);
    return kOk;
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Laplace approximation for random effects models"};
    app.require_subcommand(1);
    RunConfig cfg;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("model", cfg.model, "Model name (rw8, thetalog, mvrw, spatial)")->required();
        sub->add_option("--data", cfg.data, "Data file");
        sub->add_option("--workers", cfg.workers, "Worker count for the parallel accumulator")
            ->check(CLI::PositiveNumber);
        sub->add_option("--ordering", cfg.ordering, "Fill-reducing ordering")
            ->check(CLI::IsMember({"amd", "natural"}));
        sub->add_option("--inner-tol", cfg.inner_tol, "Inner Newton tolerance")->check(CLI::PositiveNumber);
        sub->add_option("--outer-tol", cfg.outer_tol, "Outer BFGS tolerance")->check(CLI::PositiveNumber);
        sub->add_option("--out", cfg.out, "Output JSON path");
        sub->add_option("--seed", cfg.seed, "Random seed");
    };
    auto* fit = app.add_subcommand("fit", "Fit a model and report estimates");
    add_common(fit);
    auto* check = app.add_subcommand("check", "Run gradient and sparsity checks");
    add_common(check);
    check->add_option("--metric-max", cfg.metric_max, "Limit on r for the Laplace gradient check");
    auto* profile = app.add_subcommand("profile", "Fit and report the time spent per part");
    add_common(profile);
    auto* simulate = app.add_subcommand("simulate", "Write a simulated data set");
    simulate->add_option("model", cfg.model, "Model name")->required();
    simulate->add_option("--seed", cfg.seed, "Random seed");
    simulate->add_option("--out", cfg.out, "Output data path");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    try {
        if (*fit) return cmd_fit(cfg);
        if (*check) return cmd_check(cfg);
        if (*profile) return cmd_profile(cfg);
        if (*simulate) return cmd_simulate(cfg);
    } catch (const alap::ModelError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kUsage;
    } catch (const alap::DataError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kUsage;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kNotConverged;
    }
    return kUsage;
}
