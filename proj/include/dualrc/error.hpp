#pragma once

#include <stdexcept>
#include <string>

namespace dualrc {

// Base for every error the library raises. Subclasses name the failure
// category so callers (and the CLI exit-code mapping) can branch on it.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error { using Error::Error; };
class ConfigError : public Error { using Error::Error; };
class ParamError : public Error { using Error::Error; };
class GraphError : public Error { using Error::Error; };
class FormatError : public Error { using Error::Error; };
class BoundsError : public Error { using Error::Error; };
class AnnotationError : public Error { using Error::Error; };
class DegenerateError : public Error { using Error::Error; };
class EmptyInputError : public Error { using Error::Error; };
class TrainingError : public Error { using Error::Error; };
class GenerationError : public Error { using Error::Error; };
class IoError : public Error { using Error::Error; };

// Re-raises the in-flight dualrc error with `context` prefixed to its
// message, preserving the concrete type. Call only from a catch block.
[[noreturn]] inline void rethrow_with_context(const std::string& context) {
    auto prefixed = [&](const Error& e) { return context + ": " + e.what(); };
    try {
        throw;
    } catch (const ShapeError& e) {
        throw ShapeError(prefixed(e));
    } catch (const ConfigError& e) {
        throw ConfigError(prefixed(e));
    } catch (const ParamError& e) {
        throw ParamError(prefixed(e));
    } catch (const GraphError& e) {
        throw GraphError(prefixed(e));
    } catch (const FormatError& e) {
        throw FormatError(prefixed(e));
    } catch (const BoundsError& e) {
        throw BoundsError(prefixed(e));
    } catch (const AnnotationError& e) {
        throw AnnotationError(prefixed(e));
    } catch (const DegenerateError& e) {
        throw DegenerateError(prefixed(e));
    } catch (const EmptyInputError& e) {
        throw EmptyInputError(prefixed(e));
    } catch (const TrainingError& e) {
        throw TrainingError(prefixed(e));
    } catch (const GenerationError& e) {
        throw GenerationError(prefixed(e));
    } catch (const IoError& e) {
        throw IoError(prefixed(e));
    } catch (const Error& e) {
        throw Error(prefixed(e));
    }
}

} // namespace dualrc
