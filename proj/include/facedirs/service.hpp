/*
 * facedirs - Face reenactment by learned latent directions.
 *
 * File: include/facedirs/service.hpp
 *
 * Copyright 2026 The facedirs authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once

#ifndef FACEDIRS_SERVICE_HPP
#define FACEDIRS_SERVICE_HPP

#include "facedirs/bundle.hpp"
#include "facedirs/directions.hpp"
#include "facedirs/feature_refine.hpp"
#include "facedirs/image.hpp"
#include "facedirs/inversion.hpp"

#include "httplib.h"
#include "json.hpp"

#include <atomic>
#include <chrono>
#include <cstdio>
#include <functional>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace facedirs {

/// An error with an HTTP status code, raised by the service core.
class ServiceError : public std::runtime_error
{
public:
    ServiceError(int status, const std::string& msg) : std::runtime_error(msg), status(status) {}
    int status;
};

namespace detail {

inline std::string base64_encode(const std::vector<unsigned char>& bytes)
{
    return httplib::detail::base64_encode(std::string(bytes.begin(), bytes.end()));
}

/// Standard or URL-safe alphabet, padding optional. Throws ServiceError(400) on bad input.
inline std::vector<unsigned char> base64_decode(const std::string& in)
{
    auto value = [](char c) -> int {
        if (c >= 'A' && c <= 'Z')
            return c - 'A';
        if (c >= 'a' && c <= 'z')
            return c - 'a' + 26;
        if (c >= '0' && c <= '9')
            return c - '0' + 52;
        if (c == '+' || c == '-')
            return 62;
        if (c == '/' || c == '_')
            return 63;
        return -1;
    };
    std::vector<unsigned char> out;
    unsigned buffer = 0;
    int bits = 0;
    for (char c : in)
    {
        if (c == '=' || c == '\n' || c == '\r' || c == ' ')
            continue;
        const int v = value(c);
        if (v < 0)
            throw ServiceError(400, "image field is not valid base64");
        buffer = (buffer << 6) | static_cast<unsigned>(v);
        bits += 6;
        if (bits >= 8)
        {
            bits -= 8;
            out.push_back(static_cast<unsigned char>((buffer >> bits) & 0xFF));
        }
    }
    return out;
}

} // namespace detail

struct ServiceConfig
{
    /// Sessions idle longer than this are evicted.
    std::chrono::seconds session_ttl{1800};
    /// Generator tuning used when a session is created with tune=true.
    TuningConfig tuning;
    /// Seeds the session id sequence.
    std::uint64_t seed = 1;
    /// Value of Access-Control-Allow-Origin.
    std::string cors_origin = "*";
};

/// One editing session. The stored code never changes after creation.
struct Session
{
    std::string id;
    ImageTensor source;
    LatentCode code;
    PoseExpressionParams params;
    std::chrono::steady_clock::time_point created;
    std::chrono::steady_clock::time_point last_used;
    /// Serializes requests on this session.
    std::mutex mutex;
    std::atomic<bool> tuning_requested{false};
    std::atomic<bool> tuned_ready{false};
    std::shared_ptr<const GeneratorBackend> tuned;
    std::mutex tuned_mutex;
    std::future<void> tuning_job;
    std::string tuning_error;

    std::shared_ptr<const GeneratorBackend> tuned_generator()
    {
        std::lock_guard<std::mutex> lock(tuned_mutex);
        return tuned;
    }
};

/// One entry of the request log.
struct RequestRecord
{
    std::string endpoint;
    int status = 0;
    std::chrono::steady_clock::time_point start;
    double latency_ms = 0.0;
};

/**
 * Inversion, editing, frontalization and reenactment over a read-only model
 * bundle. The JSON methods are the HTTP handlers minus transport; they throw
 * ServiceError with the status to return.
 */
class EditService
{
public:
    using Clock = std::function<std::chrono::steady_clock::time_point()>;

    /// A null bundle gives a service that answers 503 until a model is loaded.
    explicit EditService(std::shared_ptr<const ModelBundle> bundle, ServiceConfig cfg = {})
        : bundle_(std::move(bundle)), cfg_(std::move(cfg)), rng_(cfg_.seed),
          clock_([] { return std::chrono::steady_clock::now(); })
    {
        if (bundle_)
            model_ = bundle_->model();
    }

    ~EditService() { wait_for_tuning(); }

    EditService(const EditService&) = delete;
    EditService& operator=(const EditService&) = delete;

    void set_clock(Clock clock) { clock_ = std::move(clock); }
    bool model_loaded() const { return bundle_ != nullptr; }
    const ServiceConfig& config() const { return cfg_; }

    nlohmann::ordered_json attributes() const
    {
        const int num_expr = bundle_ ? bundle_->backend.estimators->num_expr() : 12;
        const double a = bundle_ ? bundle_->scaler.a : 6.0;
        nlohmann::ordered_json list = nlohmann::json::array();
        const auto names = attribute_names(num_expr);
        for (std::size_t i = 0; i < names.size(); ++i)
        {
            nlohmann::ordered_json e;
            e["name"] = names[i];
            e["index"] = i;
            e["min"] = -a;
            e["max"] = a;
            e["semantics"] = i < 3 ? "head pose angle (rescaled)" : "expression coefficient (rescaled)";
            list.push_back(e);
        }
        return list;
    }

    nlohmann::ordered_json health() const
    {
        std::lock_guard<std::mutex> lock(sessions_mutex_);
        return {{"status", "ok"}, {"model_loaded", model_loaded()}, {"sessions", sessions_.size()}};
    }

    /// Inverts the image and opens a session. With tune, generator tuning starts in the background.
    nlohmann::ordered_json create_session(const ImageTensor& image, bool tune = false)
    {
        require_model();
        evict_idle();
        check_image(image);
        auto s = std::make_shared<Session>();
        s->source = image;
        s->code = model_.encoder->invert(image);
        s->params = model_.estimators->pose_expr_params(image);
        s->created = s->last_used = clock_();
        {
            std::lock_guard<std::mutex> lock(sessions_mutex_);
            s->id = next_id();
            sessions_[s->id] = s;
        }
        if (tune)
            start_tuning(s);
        nlohmann::ordered_json r;
        r["session_id"] = s->id;
        r["params"] = named_params(scaled(s->params));
        r["preview_image"] = encode(model_.generator->render(s->code));
        r["tuning"] = tune;
        r["tuned_ready"] = s->tuned_ready.load();
        return r;
    }

    nlohmann::ordered_json create_session(const std::vector<unsigned char>& bytes, bool tune = false)
    {
        require_model();
        return create_session(decode(bytes), tune);
    }

    /// Session state: parameters and tuning readiness.
    nlohmann::ordered_json session_info(const std::string& id)
    {
        auto s = get(id);
        nlohmann::ordered_json r;
        r["session_id"] = s->id;
        r["params"] = named_params(scaled(s->params));
        r["tuning"] = s->tuning_requested.load();
        r["tuned_ready"] = s->tuned_ready.load();
        if (!s->tuning_error.empty())
            r["tuning_error"] = s->tuning_error;
        return r;
    }

    /**
     * Edit relative to the stored inversion. Body fields: "deltas" (name →
     * scaled offset), "targets" (name → absolute scaled value), "fsr" (bool).
     * A target wins over a delta for the same attribute.
     */
    nlohmann::ordered_json edit(const std::string& id, const nlohmann::ordered_json& body)
    {
        auto s = get(id);
        std::lock_guard<std::mutex> lock(s->mutex);
        const Eigen::VectorXd current = scaled(s->params);
        Eigen::VectorXd dp = Eigen::VectorXd::Zero(current.size());
        const int num_expr = static_cast<int>(current.size()) - 3;
        auto read_map = [&](const char* field, bool absolute) {
            if (!body.contains(field))
                return;
            const auto& m = body.at(field);
            if (!m.is_object())
                throw ServiceError(400, std::string("'") + field + "' must be an object of attribute values");
            for (const auto& [name, value] : m.items())
            {
                const int k = attribute_index(name, num_expr);
                if (k < 0)
                    throw ServiceError(422, "unknown attribute '" + name + "'; valid names: " + valid_names(num_expr));
                if (!value.is_number())
                    throw ServiceError(400, "value for '" + name + "' must be a number");
                const double v = value.get<double>();
                dp(k) = absolute ? v - current(k) : v;
            }
        };
        read_map("deltas", false);
        read_map("targets", true);
        return render_shift(*s, dp, body.value("fsr", false));
    }

    /// θ moved to zero; expressions untouched.
    nlohmann::ordered_json frontalize(const std::string& id, bool fsr = false)
    {
        auto s = get(id);
        std::lock_guard<std::mutex> lock(s->mutex);
        return render_shift(*s, frontalize_delta(s->params, bundle_->scaler), fsr);
    }

    /// Reenacts the session source with the target's pose and expression.
    nlohmann::ordered_json reenact(const std::string& id, const ImageTensor& target, bool fsr = false)
    {
        auto s = get(id);
        check_image(target);
        std::lock_guard<std::mutex> lock(s->mutex);
        const PoseExpressionParams p_t = model_.estimators->pose_expr_params(target);
        const Eigen::VectorXd dp = bundle_->scaler.rescale_checked(p_t.vector(), "target") - scaled(s->params);
        nlohmann::ordered_json r = render_shift(*s, dp, fsr);
        r["target_params"] = named_params(scaled(p_t));
        return r;
    }

    nlohmann::ordered_json reenact(const std::string& id, const std::vector<unsigned char>& bytes, bool fsr = false)
    {
        get(id);
        return reenact(id, decode(bytes), fsr);
    }

    /// Drops sessions idle longer than the TTL. Returns how many were removed.
    std::size_t evict_idle()
    {
        const auto now = clock_();
        std::vector<std::shared_ptr<Session>> evicted;
        {
            std::lock_guard<std::mutex> lock(sessions_mutex_);
            for (auto it = sessions_.begin(); it != sessions_.end();)
            {
                if (now - it->second->last_used > cfg_.session_ttl)
                {
                    evicted.push_back(it->second);
                    it = sessions_.erase(it);
                }
                else
                {
                    ++it;
                }
            }
        }
        return evicted.size();
    }

    std::size_t num_sessions() const
    {
        std::lock_guard<std::mutex> lock(sessions_mutex_);
        return sessions_.size();
    }

    /// Blocks until every background tuning job has finished.
    void wait_for_tuning()
    {
        std::vector<std::shared_ptr<Session>> all;
        {
            std::lock_guard<std::mutex> lock(sessions_mutex_);
            for (auto& [id, s] : sessions_)
                all.push_back(s);
        }
        for (auto& s : all)
            if (s->tuning_job.valid())
                s->tuning_job.wait();
    }

    void record(const std::string& endpoint, int status, std::chrono::steady_clock::time_point start)
    {
        const auto end = std::chrono::steady_clock::now();
        std::lock_guard<std::mutex> lock(log_mutex_);
        log_.push_back({endpoint, status, start, std::chrono::duration<double, std::milli>(end - start).count()});
    }

    std::vector<RequestRecord> request_log() const
    {
        std::lock_guard<std::mutex> lock(log_mutex_);
        return log_;
    }

    ImageTensor decode(const std::vector<unsigned char>& bytes) const
    {
        try
        {
            return decode_png(bytes);
        } catch (const ImageDecodeError& e)
        {
            throw ServiceError(400, std::string("undecodable image: ") + e.what());
        }
    }

private:
    void require_model() const
    {
        if (!bundle_)
            throw ServiceError(503, "model not loaded");
    }

    void check_image(const ImageTensor& image) const
    {
        const int n = model_.generator->image_size();
        if (image.channels != 3 || image.height != n || image.width != n)
        {
            throw ServiceError(400, "image must be " + std::to_string(n) + "x" + std::to_string(n) + " RGB, got " +
                                        std::to_string(image.width) + "x" + std::to_string(image.height));
        }
    }

    std::shared_ptr<Session> get(const std::string& id)
    {
        require_model();
        evict_idle();
        std::lock_guard<std::mutex> lock(sessions_mutex_);
        auto it = sessions_.find(id);
        if (it == sessions_.end())
            throw ServiceError(404, "unknown session '" + id + "'");
        it->second->last_used = clock_();
        return it->second;
    }

    std::string next_id()
    {
        char buf[24];
        std::snprintf(buf, sizeof(buf), "s%016llx", static_cast<unsigned long long>(rng_()));
        return buf;
    }

    Eigen::VectorXd scaled(const PoseExpressionParams& p) const { return bundle_->scaler.rescale(p.vector()); }

    static std::string valid_names(int num_expr)
    {
        std::string out;
        for (const auto& n : attribute_names(num_expr))
            out += (out.empty() ? "" : ", ") + n;
        return out;
    }

    nlohmann::ordered_json named_params(const Eigen::VectorXd& v) const
    {
        nlohmann::ordered_json j;
        const auto names = attribute_names(static_cast<int>(v.size()) - 3);
        for (Eigen::Index i = 0; i < v.size(); ++i)
            j[names[static_cast<std::size_t>(i)]] = v(i);
        return j;
    }

    static std::string encode(const ImageTensor& img) { return detail::base64_encode(encode_png(img)); }

    void start_tuning(const std::shared_ptr<Session>& s)
    {
        s->tuning_requested = true;
        std::weak_ptr<Session> weak = s;
        auto bundle = bundle_;
        auto* cache = &cache_;
        const TuningConfig cfg = cfg_.tuning;
        ImageTensor source = s->source;
        LatentCode code = s->code;
        s->tuning_job = std::async(std::launch::async, [weak, bundle, cache, cfg, source, code] {
            std::shared_ptr<const GeneratorBackend> tuned;
            std::string error;
            try
            {
                tuned = cache->get_or_tune(*bundle->backend.generator, source, code, cfg, *bundle->backend.estimators);
            } catch (const std::exception& e)
            {
                error = e.what();
            }
            if (auto sp = weak.lock())
            {
                std::lock_guard<std::mutex> lock(sp->tuned_mutex);
                sp->tuned = tuned;
                sp->tuning_error = error;
                sp->tuned_ready = tuned != nullptr;
            }
        });
    }

    /// Renders the stored code shifted by A·dp and re-estimates its parameters.
    nlohmann::ordered_json render_shift(Session& s, const Eigen::VectorXd& dp, bool fsr)
    {
        if (fsr && !model_.has_fsr())
            throw ServiceError(422, "fsr requested but the model bundle has no feature refinement");
        std::shared_ptr<const GeneratorBackend> gen = s.tuned_generator();
        const bool used_tuned = gen != nullptr;
        if (!gen)
            gen = model_.generator;
        const LatentCode w_r = apply_shift(s.code, compute_shift(dp, *model_.directions), *model_.directions);
        ImageTensor out;
        {
            ag::NoGradGuard guard;
            if (fsr)
                out = ImageTensor::from_var(synthesize_shifted_refined(*gen, s.source.var(), s.code.var(), w_r.var(),
                                                                       *model_.feature_encoder, *model_.ft));
            else
                out = gen->render(w_r);
        }
        nlohmann::ordered_json r;
        r["session_id"] = s.id;
        r["image"] = encode(out);
        r["delta"] = named_params(dp);
        r["new_params"] = named_params(scaled(model_.estimators->pose_expr_params(out)));
        r["fsr"] = fsr;
        r["tuned"] = used_tuned;
        return r;
    }

    std::shared_ptr<const ModelBundle> bundle_;
    ReenactModel model_;
    ServiceConfig cfg_;
    std::mt19937_64 rng_;
    Clock clock_;
    mutable std::mutex sessions_mutex_;
    std::map<std::string, std::shared_ptr<Session>> sessions_;
    TunedBackendCache cache_;
    mutable std::mutex log_mutex_;
    std::vector<RequestRecord> log_;
};

namespace detail {

inline bool truthy(const std::string& v) { return v == "1" || v == "true" || v == "yes" || v == "on"; }

/// Image bytes from a multipart field "image", a JSON body {"image": base64}, or the raw body.
inline std::vector<unsigned char> request_image(const httplib::Request& req, const nlohmann::ordered_json& body)
{
    if (req.is_multipart_form_data())
    {
        if (!req.has_file("image"))
            throw ServiceError(400, "multipart upload needs an 'image' field");
        const std::string& c = req.get_file_value("image").content;
        return {c.begin(), c.end()};
    }
    if (body.is_object())
    {
        if (!body.contains("image") || !body["image"].is_string())
            throw ServiceError(400, "JSON upload needs a base64 'image' field");
        return base64_decode(body["image"].get<std::string>());
    }
    return {req.body.begin(), req.body.end()};
}

inline nlohmann::ordered_json json_body(const httplib::Request& req)
{
    const std::string type = req.get_header_value("Content-Type");
    if (type.find("application/json") == std::string::npos)
        return nullptr;
    try
    {
        return req.body.empty() ? nlohmann::json::object() : nlohmann::json::parse(req.body);
    } catch (const nlohmann::json::exception& e)
    {
        throw ServiceError(400, std::string("malformed JSON: ") + e.what());
    }
}

inline bool flag(const httplib::Request& req, const nlohmann::ordered_json& body, const char* name)
{
    if (req.has_param(name))
        return truthy(req.get_param_value(name));
    if (req.is_multipart_form_data() && req.has_file(name))
        return truthy(req.get_file_value(name).content);
    if (body.is_object() && body.contains(name))
        return body[name].is_boolean() ? body[name].get<bool>() : truthy(body[name].dump());
    return false;
}

} // namespace detail

/**
 * Routes:
 *   POST /sessions                   image upload, optional tune=true
 *   GET  /sessions/{id}              parameters and tuning readiness
 *   POST /sessions/{id}/edit         {"deltas": {...}, "targets": {...}, "fsr": bool}
 *   POST /sessions/{id}/reenact      target image upload, optional fsr=true
 *   POST /sessions/{id}/frontalize   optional {"fsr": bool}
 *   GET  /attributes                 the 15 editable attributes
 *   GET  /healthz
 * Errors come back as {"error": message} with the matching status.
 */
inline void register_routes(httplib::Server& server, EditService& service)
{
    const std::string origin = service.config().cors_origin;
    server.set_default_headers({{"Access-Control-Allow-Origin", origin},
                                {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                                {"Access-Control-Allow-Headers", "Content-Type"}});

    auto wrap = [&service](const std::string& name, auto fn) {
        return [&service, name, fn](const httplib::Request& req, httplib::Response& res) {
            const auto start = std::chrono::steady_clock::now();
            try
            {
                nlohmann::ordered_json out = fn(req);
                res.status = 200;
                res.set_content(out.dump(), "application/json");
            } catch (const ServiceError& e)
            {
                res.status = e.status;
                res.set_content(nlohmann::ordered_json{{"error", e.what()}}.dump(), "application/json");
            } catch (const std::exception& e)
            {
                res.status = 500;
                res.set_content(nlohmann::ordered_json{{"error", e.what()}}.dump(), "application/json");
            }
            service.record(name, res.status, start);
        };
    };

    server.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
    server.Get("/healthz", wrap("healthz", [&service](const httplib::Request&) { return service.health(); }));
    server.Get("/attributes",
               wrap("attributes", [&service](const httplib::Request&) { return service.attributes(); }));
    server.Post("/sessions", wrap("sessions", [&service](const httplib::Request& req) {
                    if (!service.model_loaded())
                        throw ServiceError(503, "model not loaded");
                    const nlohmann::ordered_json body = detail::json_body(req);
                    return service.create_session(detail::request_image(req, body), detail::flag(req, body, "tune"));
                }));
    server.Get(R"(/sessions/([^/]+))", wrap("session", [&service](const httplib::Request& req) {
                   return service.session_info(req.matches[1]);
               }));
    server.Post(R"(/sessions/([^/]+)/edit)", wrap("edit", [&service](const httplib::Request& req) {
                    nlohmann::ordered_json body = detail::json_body(req);
                    if (body.is_null())
                    {
                        if (!req.body.empty())
                            throw ServiceError(400, "edit expects a JSON body");
                        body = nlohmann::json::object();
                    }
                    return service.edit(req.matches[1], body);
                }));
    server.Post(R"(/sessions/([^/]+)/reenact)", wrap("reenact", [&service](const httplib::Request& req) {
                    const nlohmann::ordered_json body = detail::json_body(req);
                    return service.reenact(req.matches[1], detail::request_image(req, body),
                                           detail::flag(req, body, "fsr"));
                }));
    server.Post(R"(/sessions/([^/]+)/frontalize)", wrap("frontalize", [&service](const httplib::Request& req) {
                    const nlohmann::ordered_json body = detail::json_body(req);
                    return service.frontalize(req.matches[1], detail::flag(req, body, "fsr"));
                }));
}

} // namespace facedirs

#endif /* FACEDIRS_SERVICE_HPP */
