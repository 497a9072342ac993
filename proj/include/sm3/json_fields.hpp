#pragma once

#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "sm3/errors.hpp"

namespace sm3 {

/// Reads optional keys of a JSON object into typed fields. Type errors and
/// leftover unknown keys raise ValidationError naming the full key path.
class FieldReader {
 public:
  FieldReader(const nlohmann::json& object, std::string prefix) : object_(object), prefix_(std::move(prefix)) {
    if (!object_.is_object()) throw ValidationError(prefix_ + " must be an object");
  }

  template <typename T>
  FieldReader& operator()(const char* key, T& out) {
    seen_.insert(key);
    auto it = object_.find(key);
    if (it == object_.end()) return *this;
    try {
      out = it->template get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ValidationError(path(key) + " has the wrong type (" + std::string(it->type_name()) + ")");
    }
    return *this;
  }

  /// Sub-object at `key`, or null when absent.
  const nlohmann::json* child(const char* key) {
    seen_.insert(key);
    auto it = object_.find(key);
    return it == object_.end() ? nullptr : &*it;
  }

  std::string path(const std::string& key) const { return prefix_ + "." + key; }

  void finish() const {
    for (auto it = object_.begin(); it != object_.end(); ++it) {
      if (!seen_.count(it.key())) throw ValidationError(path(it.key()) + " is not a known setting");
    }
  }

 private:
  const nlohmann::json& object_;
  std::string prefix_;
  std::set<std::string> seen_;
};

}  // namespace sm3
