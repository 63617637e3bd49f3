#pragma once

// JSON form of a FitReport. Requires nlohmann/json.

#include <nlohmann/json.hpp>

#include "alap/estimate.hpp"

namespace alap {

inline nlohmann::ordered_json to_json(const FitReport& r)
{
    nlohmann::ordered_json j;
    j["model"] = r.model;
    j["parameter_names"] = r.parameter_names;
    j["theta_hat"] = r.theta_hat;
    j["theta_se"] = r.theta_se ? nlohmann::ordered_json(*r.theta_se) : nlohmann::ordered_json(nullptr);
    j["u_hat"] = r.u_hat;
    j["u_sd"] = r.u_sd;
    j["objective"] = r.objective;
    j["iterations"] = r.iterations;
    j["converged"] = r.converged;
    j["grad_norm"] = r.grad_norm;
    j["message"] = r.message;
    if (!r.diagnostic.empty()) j["diagnostic"] = r.diagnostic;
    return j;
}

}  // namespace alap
